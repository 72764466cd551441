//! Prior, likelihood and unnormalized posterior evaluation, plus the
//! conditional-mode / finite-difference-Hessian machinery that centers
//! between-model proposals.
//!
//! All inference coordinates are log10 rate constants; priors are Normal in
//! these coordinates, so no Jacobian to linear rate space appears anywhere.
//! The likelihood is i.i.d. Gaussian: `𝒟 = G(M, k_M) + ε`,
//! `ε ~ N(0, σ²I_d)`, with `G` the observed-species predictions of the ODE
//! forward model. Likelihood evaluation integrates the model's effective
//! network only; the observables are identical for every parameter setting,
//! so this is a pure optimization.
//!
//! Integration failures evaluate to log-density −∞, which the optimizer's
//! line search backtracks away from and the sampler treats as rejection.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::kinetics::{predict_observables_included, IntegratorConfig, RateParameters};
use crate::network::{
    CoordLayout, EffectiveNetworkKey, EnCache, ModelIndicator, ReactionId, ReactionNetwork,
};

const LN_2PI: f64 = 1.8378770664093453;

/// Log density of `Normal(mean, var)` at `x`. Every prior factor and every
/// exact-prior proposal density goes through this one function so that the
/// two cancel bitwise in same-cluster acceptance ratios.
pub fn normal_log_density(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    -0.5 * (LN_2PI + var.ln()) - r * r / (2.0 * var)
}

/// Observation record conditioning the inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Observation times, strictly increasing.
    pub times: Vec<f64>,
    /// Observed concentrations, time-major then observed-species id;
    /// length `times.len() * columns.len()`.
    pub observations: Vec<f64>,
    /// Noise variance σ² of the i.i.d. Gaussian error model.
    pub noise_variance: f64,
    /// Observed species names, in the order the columns were written.
    pub columns: Vec<String>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Dataset {
    pub fn new(
        times: Vec<f64>,
        observations: Vec<f64>,
        noise_variance: f64,
        columns: Vec<String>,
    ) -> Self {
        assert_eq!(times.len() * columns.len(), observations.len());
        assert!(noise_variance > 0.0);
        Dataset {
            times,
            observations,
            noise_variance,
            columns,
        }
    }

    /// Total observation count `d`.
    pub fn d(&self) -> usize {
        self.observations.len()
    }

    /// CSV document: header `time,<species...>`, one row per observation
    /// time, full decimal precision.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("time");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        let n_obs = self.columns.len();
        for (i, t) in self.times.iter().enumerate() {
            out.push_str(&format!("{t:?}"));
            for j in 0..n_obs {
                out.push_str(&format!(",{:?}", self.observations[i * n_obs + j]));
            }
            out.push('\n');
        }
        out
    }

    /// Parses the CSV document produced by [`Dataset::to_csv_string`]. The
    /// noise variance travels in the run configuration, not the data file.
    pub fn from_csv_str(text: &str, noise_variance: f64) -> Result<Self, DatasetError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| DatasetError::Format("empty file".into()))?;
        let mut fields = header.split(',');
        if fields.next().map(|s| s.trim()) != Some("time") {
            return Err(DatasetError::Format("header must start with `time`".into()));
        }
        let columns: Vec<String> = fields.map(|s| s.trim().to_string()).collect();
        if columns.is_empty() {
            return Err(DatasetError::Format("no observed-species columns".into()));
        }
        let mut times = Vec::new();
        let mut observations = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let mut parts = line.split(',');
            let t: f64 = parts
                .next()
                .unwrap()
                .trim()
                .parse()
                .map_err(|e| DatasetError::Format(format!("row {}: {e}", lineno + 2)))?;
            times.push(t);
            let mut got = 0;
            for p in parts {
                let v: f64 = p
                    .trim()
                    .parse()
                    .map_err(|e| DatasetError::Format(format!("row {}: {e}", lineno + 2)))?;
                observations.push(v);
                got += 1;
            }
            if got != columns.len() {
                return Err(DatasetError::Format(format!(
                    "row {}: expected {} values, got {got}",
                    lineno + 2,
                    columns.len()
                )));
            }
        }
        if !times.windows(2).all(|w| w[0] < w[1]) {
            return Err(DatasetError::Format(
                "observation times must be strictly increasing".into(),
            ));
        }
        Ok(Dataset::new(times, observations, noise_variance, columns))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn read_csv(path: &Path, noise_variance: f64) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv_str(&text, noise_variance)
    }
}

/// Prior over the model space. Uniform reproduces the published estimators;
/// the weight hook keeps the derandomized estimator general.
#[derive(Debug, Clone)]
pub enum ModelPrior {
    Uniform,
}

impl ModelPrior {
    pub fn log_prob(&self, n_uncertain: usize, _model: &ModelIndicator) -> f64 {
        match self {
            // log(1 / 2^N), kept explicit rather than dropped as a constant.
            ModelPrior::Uniform => -(n_uncertain as f64) * std::f64::consts::LN_2,
        }
    }

    /// Unnormalized within-cluster weight of a model.
    pub fn weight(&self, _model: &ModelIndicator) -> f64 {
        match self {
            ModelPrior::Uniform => 1.0,
        }
    }
}

/// Optimizer settings for conditional-mode searches.
#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    /// Objective-evaluation budget per start point.
    pub max_evals_per_start: usize,
    /// Infinity-norm gradient threshold declaring convergence.
    pub grad_tol: f64,
    /// Central-difference step for gradients, log10 units.
    pub fd_step: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_evals_per_start: 200,
            grad_tol: 1e-5,
            fd_step: 1e-4,
        }
    }
}

/// Finite-difference settings for the conditional Hessian.
#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    /// Central-difference step per coordinate, log10 units.
    pub step: f64,
    /// Eigenvalue floor below which a direction's curvature is replaced by
    /// the prior precision.
    pub min_curvature: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            step: 1e-4,
            min_curvature: 1e-8,
        }
    }
}

/// Result of a conditional-mode search over the free coordinates.
#[derive(Debug, Clone)]
pub struct ModeResult {
    /// Mode values, one per free coordinate (ascending slot order).
    pub point: Vec<f64>,
    /// Conditional log-posterior at the mode (up to fixed-coordinate terms).
    pub value: f64,
    pub converged: bool,
    pub n_evals: usize,
}

#[derive(Debug, Error)]
pub enum ProposalError {
    #[error("proposal covariance not positive definite after regularization")]
    Singular,
    #[error("conditional mode is not finite")]
    NonFiniteMode,
}

/// Gaussian proposal block over a set of free coordinates: the Laplace
/// approximation of a conditional posterior, or exactly the prior when every
/// free coordinate lies outside the effective network.
#[derive(Debug, Clone)]
pub struct ConditionalGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    log_norm: f64,
    /// `(mean, variance)` per coordinate when the block is exactly the
    /// prior; the density then delegates to [`normal_log_density`] so prior
    /// and proposal terms cancel bitwise in acceptance ratios.
    exact_prior: Option<Vec<(f64, f64)>>,
}

impl ConditionalGaussian {
    fn from_mean_cov(
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        exact_prior: Option<Vec<(f64, f64)>>,
    ) -> Result<Self, ProposalError> {
        let d = mean.len();
        let chol = cov.clone().cholesky().ok_or(ProposalError::Singular)?;
        let l = chol.l();
        let log_det_half: f64 = (0..d).map(|i| l[(i, i)].ln()).sum();
        Ok(ConditionalGaussian {
            mean,
            cov,
            chol_l: l,
            log_norm: -0.5 * d as f64 * LN_2PI - log_det_half,
            exact_prior,
        })
    }

    /// A block that is exactly the product of per-coordinate priors.
    pub fn exact_prior_block(priors: &[(f64, f64)]) -> Self {
        let d = priors.len();
        let mean = DVector::from_iterator(d, priors.iter().map(|p| p.0));
        let cov = DMatrix::from_diagonal(&DVector::from_iterator(d, priors.iter().map(|p| p.1)));
        Self::from_mean_cov(mean, cov, Some(priors.to_vec()))
            .expect("diagonal prior covariance is positive definite")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// True when the density is exactly the prior product.
    pub fn is_exact_prior(&self) -> bool {
        self.exact_prior.is_some()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.dim();
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = &self.mean + &self.chol_l * z;
        x.iter().copied().collect()
    }

    pub fn log_density(&self, u: &[f64]) -> f64 {
        assert_eq!(u.len(), self.dim());
        if let Some(priors) = &self.exact_prior {
            return u
                .iter()
                .zip(priors)
                .map(|(&x, &(m, v))| normal_log_density(x, m, v))
                .sum();
        }
        let r = DVector::from_iterator(u.len(), u.iter().copied()) - &self.mean;
        // Solve L w = r; the quadratic form is then |w|².
        let w = self
            .chol_l
            .solve_lower_triangular(&r)
            .expect("cholesky factor is nonsingular");
        self.log_norm - 0.5 * w.norm_squared()
    }
}

/// Posterior evaluation context: one network, one dataset (or none for
/// prior-only targets), integrator settings and the per-chain
/// effective-network cache.
pub struct Evaluator<'a> {
    net: &'a ReactionNetwork,
    layout: CoordLayout,
    data: Option<&'a Dataset>,
    /// Tolerances for target (acceptance-ratio) evaluations.
    integ: IntegratorConfig,
    /// Tolerances inside proposal construction (mode searches and Hessians).
    /// Proposal centering does not affect the invariant distribution, so
    /// these may be looser than `integ`.
    proposal_integ: IntegratorConfig,
    model_prior: ModelPrior,
    en_cache: RefCell<EnCache>,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        net: &'a ReactionNetwork,
        data: Option<&'a Dataset>,
        integ: IntegratorConfig,
    ) -> Self {
        Evaluator {
            net,
            layout: CoordLayout::new(net),
            data,
            integ,
            proposal_integ: integ,
            model_prior: ModelPrior::Uniform,
            en_cache: RefCell::new(EnCache::new()),
        }
    }

    pub fn with_proposal_tolerances(mut self, cfg: IntegratorConfig) -> Self {
        self.proposal_integ = cfg;
        self
    }

    pub fn net(&self) -> &ReactionNetwork {
        self.net
    }

    pub fn layout(&self) -> &CoordLayout {
        &self.layout
    }

    pub fn data(&self) -> Option<&Dataset> {
        self.data
    }

    pub fn integrator_config(&self) -> &IntegratorConfig {
        &self.integ
    }

    pub fn proposal_integrator_config(&self) -> &IntegratorConfig {
        &self.proposal_integ
    }

    /// Effective network of a model, memoized.
    pub fn en(&self, model: &ModelIndicator) -> EffectiveNetworkKey {
        self.en_cache.borrow_mut().get_or_compute(self.net, model)
    }

    /// Prior log density of a named set of coordinate slots at given values.
    pub fn prior_log_density_of_slots(&self, slots: &[usize], values: &[f64]) -> f64 {
        assert_eq!(slots.len(), values.len());
        slots
            .iter()
            .zip(values)
            .map(|(&s, &v)| {
                let p = self.layout.prior(s);
                normal_log_density(v, p.mean, p.variance)
            })
            .sum()
    }

    /// Sum of prior log densities over the model's included coordinates.
    pub fn log_prior(&self, model: &ModelIndicator, coords: &[f64]) -> f64 {
        let slots = self.included_slots(model);
        let values: Vec<f64> = slots.iter().map(|&s| coords[s]).collect();
        self.prior_log_density_of_slots(&slots, &values)
    }

    /// Coordinate slots of the model's included uncertain reactions.
    pub fn included_slots(&self, model: &ModelIndicator) -> Vec<usize> {
        let ids: Vec<ReactionId> = self
            .net
            .uncertain_ids
            .iter()
            .enumerate()
            .filter(|(pos, _)| model.included[*pos])
            .map(|(_, &id)| id)
            .collect();
        self.layout.coords_of_ids(ids.iter())
    }

    /// Coordinate slots of the uncertain reactions inside an EN key.
    pub fn en_slots(&self, en: &EffectiveNetworkKey) -> Vec<usize> {
        let unc: Vec<ReactionId> = en
            .reaction_ids
            .iter()
            .copied()
            .filter(|id| self.net.uncertain_position(*id).is_some())
            .collect();
        self.layout.coords_of_ids(unc.iter())
    }

    fn params_from_coords(&self, coords: &[f64]) -> RateParameters {
        let mut params = RateParameters::base_values(self.net);
        for s in 0..self.layout.n_coords() {
            let slot = self.layout.slot(s);
            let v = coords[s];
            if v.is_finite() {
                params.set_log10(slot.reaction, slot.direction, v);
            }
        }
        params
    }

    /// Gaussian log likelihood of the data given a reaction set to
    /// integrate; −∞ on integration failure.
    pub fn log_likelihood_on(
        &self,
        reactions: &BTreeSet<ReactionId>,
        coords: &[f64],
        integ: &IntegratorConfig,
    ) -> f64 {
        let data = match self.data {
            Some(d) => d,
            None => return 0.0,
        };
        let params = self.params_from_coords(coords);
        match predict_observables_included(self.net, reactions, &params, &data.times, integ) {
            Ok(g) => {
                let d = data.d() as f64;
                let var = data.noise_variance;
                let ss: f64 = data
                    .observations
                    .iter()
                    .zip(&g)
                    .map(|(o, p)| (o - p) * (o - p))
                    .sum();
                -0.5 * d * (LN_2PI + var.ln()) - ss / (2.0 * var)
            }
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// Log likelihood of a model, evaluated on its effective network.
    pub fn log_likelihood(&self, model: &ModelIndicator, coords: &[f64]) -> f64 {
        let en = self.en(model);
        self.log_likelihood_on(&en.reaction_ids, coords, &self.integ)
    }

    /// Log likelihood integrating the full included reaction set (reference
    /// path; the EN-restricted evaluation must agree within tolerance).
    pub fn log_likelihood_full(&self, model: &ModelIndicator, coords: &[f64]) -> f64 {
        self.log_likelihood_on(&self.net.included_reactions(model), coords, &self.integ)
    }

    pub fn log_model_prior(&self, model: &ModelIndicator) -> f64 {
        self.model_prior.log_prob(self.net.n_uncertain(), model)
    }

    pub fn model_prior(&self) -> &ModelPrior {
        &self.model_prior
    }

    /// Unnormalized log posterior `log p(M, k | 𝒟)`.
    pub fn log_posterior(&self, model: &ModelIndicator, coords: &[f64]) -> f64 {
        let lp = self.log_prior(model, coords);
        let ll = self.log_likelihood(model, coords);
        if ll == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        lp + ll + self.log_model_prior(model)
    }

    /// Splits free slots into those whose reaction is inside the model's EN
    /// (the data-informed block) and the rest (conditional posterior is
    /// exactly the prior).
    fn split_free(&self, model: &ModelIndicator, free: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let en = self.en(model);
        let mut informed = Vec::new();
        let mut prior_only = Vec::new();
        for &s in free {
            if en.contains(self.layout.slot(s).reaction) {
                informed.push(s);
            } else {
                prior_only.push(s);
            }
        }
        (informed, prior_only)
    }

    /// Conditional log posterior of the informed free block, as a closure of
    /// the free values with everything else fixed at `base_coords`.
    fn conditional_objective<'b>(
        &'b self,
        en_reactions: &'b BTreeSet<ReactionId>,
        informed: &'b [usize],
        base_coords: &[f64],
        integ: &'b IntegratorConfig,
    ) -> impl FnMut(&[f64]) -> f64 + 'b {
        let mut coords = base_coords.to_vec();
        move |u: &[f64]| {
            for (&slot, &v) in informed.iter().zip(u) {
                coords[slot] = v;
            }
            let ll = self.log_likelihood_on(en_reactions, &coords, integ);
            if ll == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            let prior: f64 = informed
                .iter()
                .zip(u)
                .map(|(&s, &v)| {
                    let p = self.layout.prior(s);
                    normal_log_density(v, p.mean, p.variance)
                })
                .sum();
            ll + prior
        }
    }

    /// Maximizes the conditional posterior of the free coordinates given the
    /// others held at `base_coords`, under `model`.
    ///
    /// Free coordinates outside the model's effective network factor out of
    /// the likelihood; their conditional posterior is the prior and their
    /// mode components are the prior means, exactly and without any ODE
    /// solve. Start points are a deterministic function of the free-set
    /// geometry (prior mean and prior mean + 1σ) plus an optional
    /// caller-supplied start, so identical queries reproduce identical
    /// results.
    pub fn conditional_mode(
        &self,
        model: &ModelIndicator,
        free: &[usize],
        base_coords: &[f64],
        opt: &OptimizerConfig,
        extra_start: Option<&[f64]>,
    ) -> ModeResult {
        assert!(!free.is_empty(), "conditional mode over empty free set");
        let mut free_sorted = free.to_vec();
        free_sorted.sort_unstable();
        let (informed, _prior_only) = self.split_free(model, &free_sorted);
        if informed.is_empty() {
            let point: Vec<f64> = free_sorted
                .iter()
                .map(|&s| self.layout.prior(s).mean)
                .collect();
            let value = self.prior_log_density_of_slots(&free_sorted, &point);
            return ModeResult {
                point,
                value,
                converged: true,
                n_evals: 0,
            };
        }
        let en = self.en(model);
        let mut objective = self.conditional_objective(
            &en.reaction_ids,
            &informed,
            base_coords,
            &self.proposal_integ,
        );
        let prior_mean: Vec<f64> = informed
            .iter()
            .map(|&s| self.layout.prior(s).mean)
            .collect();
        let shifted: Vec<f64> = informed
            .iter()
            .map(|&s| {
                let p = self.layout.prior(s);
                p.mean + p.sd()
            })
            .collect();
        let mut starts = vec![prior_mean];
        if let Some(extra) = extra_start {
            let sub: Vec<f64> = free_sorted
                .iter()
                .zip(extra)
                .filter(|(s, _)| informed.contains(s))
                .map(|(_, &v)| v)
                .collect();
            starts.push(sub);
        }
        starts.push(shifted);
        let inner = maximize(&mut objective, &starts, opt);

        // Interleave the exact prior-mean components back in.
        let mut point = Vec::with_capacity(free_sorted.len());
        let mut value = inner.value;
        let mut it = informed.iter().zip(&inner.point);
        let mut next = it.next();
        for &s in &free_sorted {
            match next {
                Some((&slot, &v)) if slot == s => {
                    point.push(v);
                    next = it.next();
                }
                _ => {
                    let p = self.layout.prior(s);
                    point.push(p.mean);
                    value += normal_log_density(p.mean, p.mean, p.variance);
                }
            }
        }
        ModeResult {
            point,
            value,
            converged: inner.converged,
            n_evals: inner.n_evals,
        }
    }

    /// Laplace approximation of the conditional posterior over the free
    /// coordinates: mean at the conditional mode, covariance `−ℋ⁻¹` from a
    /// central finite-difference Hessian, symmetrized and regularized.
    ///
    /// Directions whose curvature falls below `fd.min_curvature` are assigned
    /// the prior precision, which is exact when the data are uninformative
    /// about them. Free coordinates outside the effective network contribute
    /// exact prior blocks; when the whole free set is outside, the result is
    /// flagged as an exact prior block.
    pub fn conditional_gaussian(
        &self,
        model: &ModelIndicator,
        free: &[usize],
        base_coords: &[f64],
        opt: &OptimizerConfig,
        fd: &FdConfig,
    ) -> Result<ConditionalGaussian, ProposalError> {
        let mut free_sorted = free.to_vec();
        free_sorted.sort_unstable();
        let (informed, _) = self.split_free(model, &free_sorted);
        if informed.is_empty() {
            let priors: Vec<(f64, f64)> = free_sorted
                .iter()
                .map(|&s| {
                    let p = self.layout.prior(s);
                    (p.mean, p.variance)
                })
                .collect();
            return Ok(ConditionalGaussian::exact_prior_block(&priors));
        }
        let mode = self.conditional_mode(model, &free_sorted, base_coords, opt, None);
        if mode.point.iter().any(|v| !v.is_finite()) {
            return Err(ProposalError::NonFiniteMode);
        }

        // Hessian of the informed block at the mode.
        let informed_mode: Vec<f64> = free_sorted
            .iter()
            .zip(&mode.point)
            .filter(|(s, _)| informed.contains(s))
            .map(|(_, &v)| v)
            .collect();
        let en = self.en(model);
        let mut objective = self.conditional_objective(
            &en.reaction_ids,
            &informed,
            base_coords,
            &self.proposal_integ,
        );
        let h_informed = fd_hessian(&mut objective, &informed_mode, fd.step);

        // Assemble the full negative Hessian: informed block from finite
        // differences, prior-only block exactly diagonal 1/σ².
        let d = free_sorted.len();
        let mut neg_h = DMatrix::zeros(d, d);
        let idx_of: Vec<usize> = free_sorted
            .iter()
            .enumerate()
            .filter(|(_, s)| informed.contains(s))
            .map(|(i, _)| i)
            .collect();
        for (bi, &i) in idx_of.iter().enumerate() {
            for (bj, &j) in idx_of.iter().enumerate() {
                neg_h[(i, j)] = -0.5 * (h_informed[(bi, bj)] + h_informed[(bj, bi)]);
            }
        }
        for (i, &s) in free_sorted.iter().enumerate() {
            if !informed.contains(&s) {
                neg_h[(i, i)] = 1.0 / self.layout.prior(s).variance;
            }
        }
        if neg_h.iter().any(|v| !v.is_finite()) {
            return Err(ProposalError::NonFiniteMode);
        }

        // Spectral regularization: flat or negative-curvature directions get
        // the prior precision.
        let prior_precision = DVector::from_iterator(
            d,
            free_sorted
                .iter()
                .map(|&s| 1.0 / self.layout.prior(s).variance),
        );
        let eig = nalgebra::SymmetricEigen::new(neg_h);
        let mut eigenvalues = eig.eigenvalues.clone();
        for i in 0..d {
            if eigenvalues[i] < fd.min_curvature {
                let q = eig.eigenvectors.column(i);
                let replacement: f64 = (0..d).map(|j| prior_precision[j] * q[j] * q[j]).sum();
                eigenvalues[i] = replacement.max(fd.min_curvature);
            }
        }
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..d {
            let q = eig.eigenvectors.column(i);
            let w = 1.0 / eigenvalues[i];
            for r in 0..d {
                for c in 0..d {
                    cov[(r, c)] += w * q[r] * q[c];
                }
            }
        }
        let cov = (cov.clone() + cov.transpose()) * 0.5;
        let mean = DVector::from_iterator(d, mode.point.iter().copied());
        ConditionalGaussian::from_mean_cov(mean, cov, None)
    }
}

// ---------------------------------------------------------------------------
// Finite differences and quasi-Newton search (generic over closures)
// ---------------------------------------------------------------------------

/// Central-difference gradient, falling back to one-sided differences at the
/// boundary of the target's support (−∞ values).
pub fn fd_gradient(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> (Vec<f64>, usize) {
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut evals = 0;
    let mut xp = x.to_vec();
    for i in 0..n {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        evals += 2;
        g[i] = if fp.is_finite() && fm.is_finite() {
            (fp - fm) / (2.0 * h)
        } else if fp.is_finite() || fm.is_finite() {
            let f0 = f(x);
            evals += 1;
            if fp.is_finite() {
                (fp - f0) / h
            } else {
                (f0 - fm) / h
            }
        } else {
            0.0
        };
    }
    (g, evals)
}

/// Central-difference Hessian (standard 4-point stencil off-diagonal).
pub fn fd_hessian(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    let f0 = f(x);
    let mut xp = x.to_vec();
    for i in 0..n {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            xp[i] = x[i] + h;
            xp[j] = x[j] + h;
            let fpp = f(&xp);
            xp[j] = x[j] - h;
            let fpm = f(&xp);
            xp[i] = x[i] - h;
            xp[j] = x[j] + h;
            let fmp = f(&xp);
            xp[j] = x[j] - h;
            let fmm = f(&xp);
            xp[i] = x[i];
            xp[j] = x[j];
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Multistart quasi-Newton maximization with Armijo backtracking on finite
/// difference gradients. Starts run in order; the first converged start wins
/// (results are deterministic functions of the inputs). Returns the best
/// point found even without convergence.
pub fn maximize(
    f: &mut impl FnMut(&[f64]) -> f64,
    starts: &[Vec<f64>],
    cfg: &OptimizerConfig,
) -> ModeResult {
    let mut best: Option<ModeResult> = None;
    for start in starts {
        let r = bfgs_max_single(f, start, cfg);
        let stop = r.converged;
        let better = match &best {
            None => true,
            Some(b) => r.value > b.value,
        };
        if better {
            best = Some(r);
        } else if let Some(b) = &mut best {
            b.n_evals += r.n_evals;
        }
        if stop {
            break;
        }
    }
    best.expect("at least one start point")
}

fn bfgs_max_single(
    f: &mut impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    cfg: &OptimizerConfig,
) -> ModeResult {
    let n = x0.len();
    let mut x = DVector::from_iterator(n, x0.iter().copied());
    let mut evals = 0usize;
    let mut fx = f(x.as_slice());
    evals += 1;
    if !fx.is_finite() {
        return ModeResult {
            point: x0.to_vec(),
            value: fx,
            converged: false,
            n_evals: evals,
        };
    }
    let (g0, e) = fd_gradient(f, x.as_slice(), cfg.fd_step);
    evals += e;
    let mut g = DVector::from_iterator(n, g0.iter().copied());
    let mut h_inv = DMatrix::<f64>::identity(n, n);

    while evals < cfg.max_evals_per_start {
        if g.amax() <= cfg.grad_tol {
            return ModeResult {
                point: x.iter().copied().collect(),
                value: fx,
                converged: true,
                n_evals: evals,
            };
        }
        let mut dir = &h_inv * &g;
        let mut slope = dir.dot(&g);
        if !(slope > 0.0) || !slope.is_finite() {
            h_inv = DMatrix::identity(n, n);
            dir = g.clone();
            slope = dir.dot(&g);
            if !(slope > 0.0) {
                break;
            }
        }
        // Armijo backtracking toward higher objective values.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..20 {
            if evals >= cfg.max_evals_per_start {
                break;
            }
            let cand = &x + &dir * step;
            let fc = f(cand.as_slice());
            evals += 1;
            if fc.is_finite() && fc >= fx + 1e-4 * step * slope {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let (x_new, f_new) = match accepted {
            Some(v) => v,
            None => break,
        };
        let (g_new_v, e) = fd_gradient(f, x_new.as_slice(), cfg.fd_step);
        evals += e;
        let g_new = DVector::from_iterator(n, g_new_v.iter().copied());

        // Inverse-Hessian BFGS update in maximization form (y = g_new - g,
        // curvature condition s·y < 0 for a concave objective).
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy < -1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            // H' = (I - ρ s yᵀ) H (I - ρ y sᵀ) + |ρ| s sᵀ
            let i_mat = DMatrix::<f64>::identity(n, n);
            let left = &i_mat - (&s * y.transpose()) * rho;
            h_inv = &left * h_inv * left.transpose() + (&s * s.transpose()) * rho.abs();
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }
    ModeResult {
        point: x.iter().copied().collect(),
        value: fx,
        converged: g.amax() <= cfg.grad_tol,
        n_evals: evals,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::predict_observables;
    use crate::network::presets;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn full_model(net: &ReactionNetwork) -> ModelIndicator {
        ModelIndicator::all(net.n_uncertain())
    }

    /// Synthetic dataset generated at base values, noiseless.
    fn noiseless_dataset(net: &ReactionNetwork, times: &[f64], var: f64) -> Dataset {
        let params = RateParameters::base_values(net);
        let g = predict_observables(
            net,
            &full_model(net),
            &params,
            times,
            &IntegratorConfig::default(),
        )
        .unwrap();
        Dataset::new(times.to_vec(), g, var, vec!["BRaf".into()])
    }

    fn base_coords(net: &ReactionNetwork, layout: &CoordLayout) -> Vec<f64> {
        (0..layout.n_coords())
            .map(|s| {
                let slot = layout.slot(s);
                net.reaction(slot.reaction).base_log10(slot.direction)
            })
            .collect()
    }

    #[test]
    fn prior_log_density_closed_forms() {
        // Single coordinate at its prior mean with σ_p = 0.2:
        // −½ ln(2π·0.04).
        let v = normal_log_density(1.0, 1.0, 0.04);
        assert!((v - 0.6904993792294276).abs() < 1e-12);
        // Two independent coordinates add.
        let net = presets::five_reaction_problem();
        let eval = Evaluator::new(&net, None, IntegratorConfig::default());
        let model = ModelIndicator::from_mask(0b00011, 5);
        let coords = vec![1.1, 1.4, f64::NAN, f64::NAN, f64::NAN];
        let lp = eval.log_prior(&model, &coords);
        let expected = normal_log_density(1.1, 1.1, 0.2) + normal_log_density(1.4, 1.4, 0.2);
        assert!((lp - expected).abs() < 1e-12);
        // Zero uncertain reactions included: empty product.
        let none = ModelIndicator::none(5);
        assert_eq!(eval.log_prior(&none, &coords), 0.0);
    }

    #[test]
    fn prior_integrates_to_one() {
        // Simpson quadrature of exp(log prior) over ±8σ for one coordinate.
        let (mean, var) = (1.1f64, 0.2f64);
        let sd = var.sqrt();
        let (a, b) = (mean - 8.0 * sd, mean + 8.0 * sd);
        let n = 2000;
        let h = (b - a) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let x = a + i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            total += w * normal_log_density(x, mean, var).exp();
        }
        total *= h / 3.0;
        assert!((total - 1.0).abs() < 1e-6, "integral {total}");
    }

    #[test]
    fn log_likelihood_matches_gaussian_formula() {
        // Zero residual, d = 20, σ² = 4 → −10 ln(8π).
        let net = presets::five_reaction_problem();
        let times: Vec<f64> = (1..=20).map(|i| 0.2 * i as f64).collect();
        let data = noiseless_dataset(&net, &times, 4.0);
        let eval = Evaluator::new(&net, Some(&data), IntegratorConfig::default());
        let coords = base_coords(&net, eval.layout());
        let ll = eval.log_likelihood_full(&full_model(&net), &coords);
        let expected = -10.0 * (8.0 * std::f64::consts::PI).ln();
        assert!((expected - (-32.24171427529236)).abs() < 1e-10);
        // The stored data came from one integration and the likelihood
        // re-integrates, so the residual is only zero to solver accuracy.
        assert!((ll - expected).abs() < 1e-3, "ll = {ll}");
        let ll_en = eval.log_likelihood(&full_model(&net), &coords);
        assert!((ll - ll_en).abs() < 1e-6);
    }

    #[test]
    fn single_residual_of_one_sigma() {
        let net = presets::five_reaction_problem();
        let times = vec![1.0];
        let mut data = noiseless_dataset(&net, &times, 9.0);
        data.observations[0] += 3.0;
        let eval = Evaluator::new(&net, Some(&data), IntegratorConfig::default());
        let coords = base_coords(&net, eval.layout());
        let ll = eval.log_likelihood(&full_model(&net), &coords);
        let expected = -0.5 * (2.0 * std::f64::consts::PI * 9.0).ln() - 0.5;
        assert!((ll - expected).abs() < 1e-4, "ll = {ll}, want {expected}");
    }

    #[test]
    fn likelihood_is_invariant_under_en_reduction() {
        let net = presets::five_reaction_problem();
        let times: Vec<f64> = (1..=10).map(|i| 0.3 * i as f64).collect();
        let data = noiseless_dataset(&net, &times, 4.0);
        let eval = Evaluator::new(&net, Some(&data), IntegratorConfig::default());
        let mut rng = ChaCha12Rng::seed_from_u64(5150);
        for _ in 0..50 {
            let mask = rng.random_range(0..32u64);
            let model = ModelIndicator::from_mask(mask, 5);
            let coords: Vec<f64> = (0..5)
                .map(|s| {
                    let p = eval.layout().prior(s);
                    p.mean + p.sd() * rng.random_range(-1.5..1.5)
                })
                .collect();
            let full = eval.log_likelihood_full(&model, &coords);
            let reduced = eval.log_likelihood(&model, &coords);
            let tol = 10.0 * eval.integrator_config().rel_tol * full.abs().max(1.0);
            assert!(
                (full - reduced).abs() <= tol.max(1e-6),
                "model {model}: {full} vs {reduced}"
            );
        }
    }

    #[test]
    fn model_prior_is_uniform_over_the_space() {
        let net = presets::five_reaction_problem();
        let eval = Evaluator::new(&net, None, IntegratorConfig::default());
        let lp = eval.log_model_prior(&full_model(&net));
        assert!((lp - (-(32f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn neg_infinity_likelihood_dominates_the_posterior() {
        let net = presets::five_reaction_problem();
        let times = vec![0.5, 1.0];
        let data = noiseless_dataset(&net, &times, 4.0);
        let eval = Evaluator::new(&net, Some(&data), IntegratorConfig::default());
        // Absurd rate constants overflow the integrator's step budget.
        let coords = vec![80.0, 80.0, 80.0, 80.0, 80.0];
        let lp = eval.log_posterior(&full_model(&net), &coords);
        assert_eq!(lp, f64::NEG_INFINITY);
    }

    #[test]
    fn posterior_peaks_near_the_generating_values() {
        let net = presets::five_reaction_problem();
        let times: Vec<f64> = (1..=20).map(|i| 0.2 * i as f64).collect();
        let data = noiseless_dataset(&net, &times, 4.0);
        let eval = Evaluator::new(&net, Some(&data), IntegratorConfig::default());
        let coords = base_coords(&net, eval.layout());
        let at_base = eval.log_posterior(&full_model(&net), &coords);
        assert!(at_base.is_finite());
        let shifted: Vec<f64> = coords.iter().map(|v| v + 2.0).collect();
        let away = eval.log_posterior(&full_model(&net), &shifted);
        assert!(at_base > away, "{at_base} vs {away}");
    }

    #[test]
    fn quasi_newton_finds_quadratic_vertex() {
        // Synthetic strictly concave quadratic: the optimizer must hit the
        // analytic vertex within grad_tol.
        let mut f = |x: &[f64]| {
            -2.0 * (x[0] - 1.5) * (x[0] - 1.5) - 0.5 * (x[1] + 0.25) * (x[1] + 0.25)
                + 0.3 * (x[0] - 1.5) * (x[1] + 0.25)
        };
        let cfg = OptimizerConfig::default();
        let res = maximize(&mut f, &[vec![0.0, 0.0]], &cfg);
        assert!(res.converged);
        assert!((res.point[0] - 1.5).abs() < 1e-4, "{:?}", res.point);
        assert!((res.point[1] + 0.25).abs() < 1e-4, "{:?}", res.point);
    }

    #[test]
    fn fd_gradient_is_step_size_consistent_on_smooth_targets() {
        let mut f = |x: &[f64]| -(x[0] * x[0]) / 0.4 + 0.7 * x[0] - (x[1] - 2.0).powi(2);
        let x = vec![0.3, 1.1];
        let (g1, _) = fd_gradient(&mut f, &x, 1e-4);
        let (g2, _) = fd_gradient(&mut f, &x, 1e-5);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() / b.abs().max(1.0) < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn fd_hessian_is_exact_on_quadratics() {
        // Known covariance C: log density −½ xᵀ C⁻¹ x has Hessian −C⁻¹, so
        // the Laplace covariance recovers C exactly (quadratics have no
        // truncation error).
        let c = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.8]);
        let c_inv = c.clone().try_inverse().unwrap();
        let mut f = |x: &[f64]| {
            let v = DVector::from_row_slice(x);
            -0.5 * (v.transpose() * &c_inv * &v)[(0, 0)]
        };
        let h = fd_hessian(&mut f, &[0.1, -0.2], 1e-4);
        let sigma = (-(h.clone() + h.transpose()) * 0.5).try_inverse().unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (sigma[(i, j)] - c[(i, j)]).abs() / c[(i, j)].abs() < 1e-4,
                    "Σ[{i},{j}] = {} vs {}",
                    sigma[(i, j)],
                    c[(i, j)]
                );
            }
        }
    }

    #[test]
    fn conditional_mode_outside_the_en_is_the_prior_mean() {
        let net = presets::five_reaction_problem();
        let times: Vec<f64> = (1..=10).map(|i| 0.3 * i as f64).collect();
        let data = noiseless_dataset(&net, &times, 4.0);
        let eval = Evaluator::new(&net, Some(&data), IntegratorConfig::default());
        // Model without reaction 3: the whole uncertain branch is outside
        // the EN, so every free coordinate's conditional posterior is its
        // prior.
        let model = ModelIndicator::from_mask(0b11110, 5);
        let coords = base_coords(&net, eval.layout());
        let free = vec![1, 2]; // reactions 4, 5
        let res = eval.conditional_mode(&model, &free, &coords, &Default::default(), None);
        assert!(res.converged);
        assert_eq!(res.n_evals, 0);
        assert_eq!(res.point, vec![1.4, 2.6]);
        let g = eval
            .conditional_gaussian(
                &model,
                &free,
                &coords,
                &Default::default(),
                &Default::default(),
            )
            .unwrap();
        assert!(g.is_exact_prior());
        assert_eq!(g.cov[(0, 0)], 0.2);
        assert_eq!(g.cov[(1, 1)], 0.2);
        assert_eq!(g.cov[(0, 1)], 0.0);
    }

    #[test]
    fn prior_only_pipeline_recovers_the_prior_covariance() {
        // With no data the conditional posterior is the prior for every
        // coordinate, including those inside the EN: the optimizer and the
        // FD Hessian run on an exactly quadratic target.
        let net = presets::five_reaction_problem();
        let eval = Evaluator::new(&net, None, IntegratorConfig::default());
        let model = full_model(&net);
        let coords = base_coords(&net, eval.layout());
        let free = vec![0, 3];
        let g = eval
            .conditional_gaussian(
                &model,
                &free,
                &coords,
                &Default::default(),
                &Default::default(),
            )
            .unwrap();
        assert!((g.mean[0] - 1.1).abs() < 1e-6);
        assert!((g.mean[1] - 1.0).abs() < 1e-6);
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 0.2 } else { 0.0 };
                assert!(
                    (g.cov[(i, j)] - want).abs() < 2e-4,
                    "cov[{i},{j}] = {}",
                    g.cov[(i, j)]
                );
            }
        }
    }

    #[test]
    fn conditional_mode_matches_grid_search() {
        // Free coordinate: reaction 4 of the 12-reaction problem, others at
        // base values. Oracle: dense 1-D grid over prior ±4σ.
        let net = presets::five_reaction_problem();
        let times: Vec<f64> = (1..=10).map(|i| 0.3 * i as f64).collect();
        let data = noiseless_dataset(&net, &times, 4.0);
        let eval = Evaluator::new(&net, Some(&data), IntegratorConfig::default());
        let model = full_model(&net);
        let coords = base_coords(&net, eval.layout());
        let free = vec![1usize]; // reaction 4
        let res = eval.conditional_mode(&model, &free, &coords, &Default::default(), None);

        let prior = eval.layout().prior(1);
        let lo = prior.mean - 4.0 * prior.sd();
        let hi = prior.mean + 4.0 * prior.sd();
        let n = 1000;
        let mut best_x = lo;
        let mut best_v = f64::NEG_INFINITY;
        for i in 0..=n {
            let x = lo + (hi - lo) * i as f64 / n as f64;
            let mut c = coords.clone();
            c[1] = x;
            let v = eval.log_likelihood(&model, &c)
                + normal_log_density(x, prior.mean, prior.variance);
            if v > best_v {
                best_v = v;
                best_x = x;
            }
        }
        let spacing = (hi - lo) / n as f64;
        assert!(
            (res.point[0] - best_x).abs() <= spacing,
            "mode {} vs grid argmax {best_x} (spacing {spacing})",
            res.point[0]
        );
    }

    #[test]
    fn conditional_variance_agrees_with_quadrature() {
        // 1-D quadrature oracle for the reaction-4 conditional variance, on
        // the bundled observation grid (20 points over 2.5 time units).
        let net = presets::five_reaction_problem();
        let times: Vec<f64> = (1..=20).map(|i| 0.125 * i as f64).collect();
        let data = noiseless_dataset(&net, &times, 4.0);
        let eval = Evaluator::new(&net, Some(&data), IntegratorConfig::default());
        let model = full_model(&net);
        let coords = base_coords(&net, eval.layout());
        let g = eval
            .conditional_gaussian(
                &model,
                &[1],
                &coords,
                &Default::default(),
                &Default::default(),
            )
            .unwrap();

        let prior = eval.layout().prior(1);
        let lo = prior.mean - 4.0 * prior.sd();
        let hi = prior.mean + 4.0 * prior.sd();
        let n = 400;
        let h = (hi - lo) / n as f64;
        let mut log_vals = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let mut c = coords.clone();
            c[1] = x;
            log_vals.push(
                eval.log_likelihood(&model, &c)
                    + normal_log_density(x, prior.mean, prior.variance),
            );
        }
        let max = log_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let simpson = |vals: &dyn Fn(usize) -> f64| -> f64 {
            let mut acc = 0.0;
            for i in 0..=n {
                let w = if i == 0 || i == n {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                acc += w * vals(i);
            }
            acc * h / 3.0
        };
        let z = simpson(&|i| (log_vals[i] - max).exp());
        let mean = simpson(&|i| {
            let x = lo + i as f64 * h;
            x * (log_vals[i] - max).exp()
        }) / z;
        let var = simpson(&|i| {
            let x = lo + i as f64 * h;
            (x - mean) * (x - mean) * (log_vals[i] - max).exp()
        }) / z;
        let got = g.cov[(0, 0)];
        assert!(
            (got - var).abs() / var < 0.2,
            "Laplace variance {got} vs quadrature {var}"
        );
    }

    #[test]
    fn gaussian_block_samples_and_density_are_consistent() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mean = DVector::from_row_slice(&[0.5, -1.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.4]);
        let g = ConditionalGaussian::from_mean_cov(mean.clone(), cov.clone(), None).unwrap();
        // Sample moments.
        let n = 20000;
        let mut m = [0.0; 2];
        let mut c00 = 0.0;
        let mut c11 = 0.0;
        let mut c01 = 0.0;
        let samples: Vec<Vec<f64>> = (0..n).map(|_| g.sample(&mut rng)).collect();
        for s in &samples {
            m[0] += s[0];
            m[1] += s[1];
        }
        m[0] /= n as f64;
        m[1] /= n as f64;
        for s in &samples {
            c00 += (s[0] - m[0]) * (s[0] - m[0]);
            c11 += (s[1] - m[1]) * (s[1] - m[1]);
            c01 += (s[0] - m[0]) * (s[1] - m[1]);
        }
        assert!((m[0] - 0.5).abs() < 0.02);
        assert!((m[1] + 1.0).abs() < 0.02);
        assert!((c00 / n as f64 - 0.3).abs() < 0.02);
        assert!((c11 / n as f64 - 0.4).abs() < 0.02);
        assert!((c01 / n as f64 - 0.1).abs() < 0.02);
        // Density against the closed form at a point.
        let x = [0.2, -0.8];
        let det: f64 = 0.3 * 0.4 - 0.1 * 0.1;
        let inv = [[0.4 / det, -0.1 / det], [-0.1 / det, 0.3 / det]];
        let dx = [x[0] - 0.5, x[1] + 1.0];
        let q =
            dx[0] * dx[0] * inv[0][0] + 2.0 * dx[0] * dx[1] * inv[0][1] + dx[1] * dx[1] * inv[1][1];
        let want = -LN_2PI - 0.5 * det.ln() - 0.5 * q;
        assert!((g.log_density(&x) - want).abs() < 1e-10);
        // Exact prior blocks delegate to the shared normal density.
        let e = ConditionalGaussian::exact_prior_block(&[(1.1, 0.2)]);
        assert_eq!(e.log_density(&[0.9]), normal_log_density(0.9, 1.1, 0.2));
    }

    #[test]
    fn dataset_csv_round_trip() {
        let d = Dataset::new(
            vec![0.5, 1.0, 1.5],
            vec![10.0, 20.0, 30.0],
            4.0,
            vec!["BRaf".into()],
        );
        let text = d.to_csv_string();
        assert!(text.starts_with("time,BRaf\n"));
        let back = Dataset::from_csv_str(&text, 4.0).unwrap();
        assert_eq!(back, d);
        // Rejects a malformed header.
        assert!(Dataset::from_csv_str("t,BRaf\n0,1\n", 4.0).is_err());
    }
}
