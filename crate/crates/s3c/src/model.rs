//! The spike-and-slab sparse coding generative model.
//!
//! A model over visible vectors `v` (length D) with binary spike variables
//! `h` and real slab variables `s` (both length N):
//!
//! ```text
//! p(h_i = 1)   = sigmoid(b_i)
//! p(s_i | h_i) = N(s_i | h_i mu_i, 1 / alpha_i)
//! p(v | s, h)  = N(v | W (h o s), diag(1 / beta))
//! ```
//!
//! Dictionary columns are constrained to unit Euclidean norm. Both precisions
//! are diagonal; a scalar visible precision is broadcast at construction.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};

use crate::error::{Result, S3cError};
use crate::math::{gaussian_log_pdf, log1pexp, logsumexp, sigmoid};

/// Tolerance for the unit-norm constraint on dictionary columns.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Largest hidden dimension the exact enumeration routines accept by default.
pub const DEFAULT_ENUMERATION_LIMIT: usize = 15;

/// Full parameter set of the model.
///
/// Immutable in normal use: inference and learning read it concurrently and
/// the M-step produces a fresh instance rather than mutating in place.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Dictionary, D x N, unit-norm columns.
    dictionary: Array2<f64>,
    /// Spike biases b, length N.
    spike_bias: Array1<f64>,
    /// Slab means mu, length N.
    slab_mean: Array1<f64>,
    /// Slab precisions alpha, length N, strictly positive.
    slab_precision: Array1<f64>,
    /// Visible precisions beta, length D, strictly positive.
    visible_precision: Array1<f64>,
}

impl ModelParams {
    /// Builds a parameter set, checking only dimensional consistency.
    ///
    /// Norm and positivity constraints are reported by [`ModelParams::validate`],
    /// not enforced here, so partially-violating parameter sets can be inspected.
    pub fn new(
        dictionary: Array2<f64>,
        spike_bias: Array1<f64>,
        slab_mean: Array1<f64>,
        slab_precision: Array1<f64>,
        visible_precision: Array1<f64>,
    ) -> Result<Self> {
        let (d, n) = dictionary.dim();
        for (name, len) in [
            ("spike_bias", spike_bias.len()),
            ("slab_mean", slab_mean.len()),
            ("slab_precision", slab_precision.len()),
        ] {
            if len != n {
                return Err(S3cError::DimensionMismatch {
                    context: name,
                    expected: n,
                    actual: len,
                });
            }
        }
        if visible_precision.len() != d {
            return Err(S3cError::DimensionMismatch {
                context: "visible_precision",
                expected: d,
                actual: visible_precision.len(),
            });
        }
        if d == 0 || n == 0 {
            return Err(S3cError::InvalidConfig(
                "model dimensions must be positive".into(),
            ));
        }
        Ok(Self {
            dictionary,
            spike_bias,
            slab_mean,
            slab_precision,
            visible_precision,
        })
    }

    /// As [`ModelParams::new`] with a scalar visible precision broadcast to
    /// every visible dimension.
    pub fn with_scalar_beta(
        dictionary: Array2<f64>,
        spike_bias: Array1<f64>,
        slab_mean: Array1<f64>,
        slab_precision: Array1<f64>,
        visible_precision: f64,
    ) -> Result<Self> {
        let d = dictionary.nrows();
        Self::new(
            dictionary,
            spike_bias,
            slab_mean,
            slab_precision,
            Array1::from_elem(d, visible_precision),
        )
    }

    pub fn n_visible(&self) -> usize {
        self.dictionary.nrows()
    }

    pub fn n_hidden(&self) -> usize {
        self.dictionary.ncols()
    }

    pub fn dictionary(&self) -> &Array2<f64> {
        &self.dictionary
    }

    pub fn spike_bias(&self) -> &Array1<f64> {
        &self.spike_bias
    }

    pub fn slab_mean(&self) -> &Array1<f64> {
        &self.slab_mean
    }

    pub fn slab_precision(&self) -> &Array1<f64> {
        &self.slab_precision
    }

    pub fn visible_precision(&self) -> &Array1<f64> {
        &self.visible_precision
    }

    /// Checks every structural constraint and returns the violations found.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        for (i, col) in self.dictionary.axis_iter(Axis(1)).enumerate() {
            let norm = col.dot(&col).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                violations.push(ConstraintViolation::ColumnNorm { index: i, norm });
            }
        }
        for (i, &a) in self.slab_precision.iter().enumerate() {
            if !(a > 0.0) {
                violations.push(ConstraintViolation::NonPositiveSlabPrecision {
                    index: i,
                    value: a,
                });
            }
        }
        for (d, &b) in self.visible_precision.iter().enumerate() {
            if !(b > 0.0) {
                violations.push(ConstraintViolation::NonPositiveVisiblePrecision {
                    index: d,
                    value: b,
                });
            }
        }
        ValidationReport { violations }
    }

    /// Rescales every dictionary column to unit Euclidean norm.
    ///
    /// The projection step applied after each parameter update. Zero columns
    /// are left untouched (they cannot be normalized).
    pub fn renormalize_columns(&mut self) {
        for mut col in self.dictionary.axis_iter_mut(Axis(1)) {
            let norm = col.dot(&col).sqrt();
            if norm > 0.0 {
                col.mapv_inplace(|x| x / norm);
            }
        }
    }

    /// Consumes the parameter set, returning the raw arrays
    /// `(dictionary, spike_bias, slab_mean, slab_precision, visible_precision)`.
    pub fn into_parts(self) -> (Array2<f64>, Array1<f64>, Array1<f64>, Array1<f64>, Array1<f64>) {
        (
            self.dictionary,
            self.spike_bias,
            self.slab_mean,
            self.slab_precision,
            self.visible_precision,
        )
    }

    fn check_configuration(&self, cfg: &CompleteConfiguration) -> Result<()> {
        if cfg.visible.len() != self.n_visible() {
            return Err(S3cError::DimensionMismatch {
                context: "configuration visible vector",
                expected: self.n_visible(),
                actual: cfg.visible.len(),
            });
        }
        if cfg.slab.len() != self.n_hidden() || cfg.spike.len() != self.n_hidden() {
            return Err(S3cError::DimensionMismatch {
                context: "configuration latent vectors",
                expected: self.n_hidden(),
                actual: cfg.slab.len(),
            });
        }
        Ok(())
    }

    /// Energy of a complete configuration:
    ///
    /// ```text
    /// E(v,s,h) = 1/2 (v - W(h o s))' B (v - W(h o s))
    ///          + 1/2 sum_i alpha_i (s_i - mu_i h_i)^2
    ///          - sum_i b_i h_i
    /// ```
    pub fn energy(&self, cfg: &CompleteConfiguration) -> Result<f64> {
        self.check_configuration(cfg)?;
        let code = &cfg.spike * &cfg.slab;
        let residual = &cfg.visible - &self.dictionary.dot(&code);
        let recon_term: f64 = residual
            .iter()
            .zip(self.visible_precision.iter())
            .map(|(r, beta)| beta * r * r)
            .sum();
        let slab_term: f64 = cfg
            .slab
            .iter()
            .zip(cfg.spike.iter())
            .zip(self.slab_precision.iter().zip(self.slab_mean.iter()))
            .map(|((s, h), (alpha, mu))| {
                let d = s - mu * h;
                alpha * d * d
            })
            .sum();
        let bias_term: f64 = self.spike_bias.dot(&cfg.spike);
        Ok(0.5 * recon_term + 0.5 * slab_term - bias_term)
    }

    /// Fully-normalized log joint density `log p(v, s, h)`.
    pub fn log_joint(&self, cfg: &CompleteConfiguration) -> Result<f64> {
        self.check_configuration(cfg)?;
        let energy = self.energy(cfg)?;
        Ok(-energy - self.log_partition())
    }

    /// Log normalizer relating the energy to the joint density:
    /// `log p(v,s,h) = -E(v,s,h) - log Z`.
    ///
    /// Because the model is directed, `Z` factorizes into the Bernoulli and
    /// Gaussian normalizers and is finite for every parameter setting.
    pub fn log_partition(&self) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let spike: f64 = self.spike_bias.iter().map(|&b| log1pexp(b)).sum();
        let slab: f64 = self
            .slab_precision
            .iter()
            .map(|&a| 0.5 * (ln_2pi - a.ln()))
            .sum();
        let visible: f64 = self
            .visible_precision
            .iter()
            .map(|&b| 0.5 * (ln_2pi - b.ln()))
            .sum();
        spike + slab + visible
    }

    /// Exact log marginal `log p(v)` by enumerating all 2^N spike patterns.
    ///
    /// Only intended for verification at small N; the cost is exponential in
    /// the hidden dimension.
    pub fn exact_log_marginal(&self, v: ArrayView1<f64>) -> Result<f64> {
        self.exact_log_marginal_with_limit(v, DEFAULT_ENUMERATION_LIMIT)
    }

    /// As [`ModelParams::exact_log_marginal`] with an explicit enumeration limit.
    pub fn exact_log_marginal_with_limit(&self, v: ArrayView1<f64>, limit: usize) -> Result<f64> {
        let n = self.n_hidden();
        if n > limit {
            return Err(S3cError::EnumerationLimit {
                n_hidden: n,
                limit,
            });
        }
        if v.len() != self.n_visible() {
            return Err(S3cError::DimensionMismatch {
                context: "visible vector",
                expected: self.n_visible(),
                actual: v.len(),
            });
        }
        let mut log_terms = Vec::with_capacity(1usize << n);
        for pattern in 0..(1u64 << n) {
            let ev = pattern_evidence(self, v, pattern)?;
            log_terms.push(ev.log_prior + ev.log_likelihood);
        }
        Ok(logsumexp(&log_terms))
    }

    /// Draws ancestral samples from the generative process.
    ///
    /// Deterministic given the seed; each call creates its own generator so
    /// concurrent sampling shares no state.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<CompleteConfiguration> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.n_hidden();
        let d = self.n_visible();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut spike = Array1::zeros(n);
            let mut slab = Array1::zeros(n);
            for i in 0..n {
                let p = sigmoid(self.spike_bias[i]);
                let h = Bernoulli::new(p).expect("sigmoid output in [0,1]").sample(&mut rng);
                spike[i] = if h { 1.0 } else { 0.0 };
                let sd = self.slab_precision[i].powf(-0.5);
                let dist = Normal::new(spike[i] * self.slab_mean[i], sd)
                    .expect("positive slab std dev");
                slab[i] = dist.sample(&mut rng);
            }
            let code = &spike * &slab;
            let mean = self.dictionary.dot(&code);
            let mut visible = Array1::zeros(d);
            for dd in 0..d {
                let sd = self.visible_precision[dd].powf(-0.5);
                let dist = Normal::new(mean[dd], sd).expect("positive visible std dev");
                visible[dd] = dist.sample(&mut rng);
            }
            out.push(CompleteConfiguration {
                visible,
                slab,
                spike,
            });
        }
        out
    }
}

/// One joint assignment of visible and latent variables.
#[derive(Debug, Clone, PartialEq)]
pub struct CompleteConfiguration {
    /// Visible vector, length D.
    pub visible: Array1<f64>,
    /// Slab values, length N.
    pub slab: Array1<f64>,
    /// Spike indicators, length N, each exactly 0.0 or 1.0.
    pub spike: Array1<f64>,
}

impl CompleteConfiguration {
    /// Builds a configuration, rejecting spike entries outside {0, 1}.
    pub fn new(visible: Array1<f64>, slab: Array1<f64>, spike: Array1<f64>) -> Result<Self> {
        if slab.len() != spike.len() {
            return Err(S3cError::DimensionMismatch {
                context: "slab vs spike length",
                expected: slab.len(),
                actual: spike.len(),
            });
        }
        if spike.iter().any(|&h| h != 0.0 && h != 1.0) {
            return Err(S3cError::InvalidConfig(
                "spike entries must be exactly 0 or 1".into(),
            ));
        }
        Ok(Self {
            visible,
            slab,
            spike,
        })
    }
}

/// One structural constraint violation found by [`ModelParams::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintViolation {
    ColumnNorm { index: usize, norm: f64 },
    NonPositiveSlabPrecision { index: usize, value: f64 },
    NonPositiveVisiblePrecision { index: usize, value: f64 },
}

impl std::fmt::Display for ConstraintViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConstraintViolation::ColumnNorm { index, norm } => {
                write!(f, "dictionary column {index} has norm {norm} (expected 1)")
            }
            ConstraintViolation::NonPositiveSlabPrecision { index, value } => {
                write!(f, "slab precision {index} is {value} (must be > 0)")
            }
            ConstraintViolation::NonPositiveVisiblePrecision { index, value } => {
                write!(f, "visible precision {index} is {value} (must be > 0)")
            }
        }
    }
}

/// Outcome of checking model constraints; violations are data, not failures.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<ConstraintViolation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_ok() {
            write!(f, "ok")
        } else {
            for v in &self.violations {
                writeln!(f, "{v}")?;
            }
            Ok(())
        }
    }
}

/// Per-pattern evidence and slab posterior moments for one spike pattern.
///
/// For a fixed pattern the marginal of `v` is Gaussian and the conditional of
/// the active slabs given `v` is Gaussian with precision
/// `M_A = diag(alpha_A) + W_A' B W_A`. Everything here is computed through
/// `M_A` (Woodbury / matrix determinant lemma), so only an |A| x |A|
/// factorization is needed.
#[derive(Debug, Clone)]
pub(crate) struct PatternEvidence {
    /// log p(h) for this pattern.
    pub log_prior: f64,
    /// log p(v | h), the analytic Gaussian marginal.
    pub log_likelihood: f64,
    /// E[s_i | v, h] for every unit; zero at inactive units.
    pub slab_posterior_mean: Array1<f64>,
}

pub(crate) fn pattern_bit(pattern: u64, i: usize) -> bool {
    pattern >> i & 1 == 1
}

/// Evaluates prior, Gaussian evidence, and slab posterior moments for one
/// spike pattern. Shared by the exact marginal and exact posterior oracles.
pub(crate) fn pattern_evidence(
    params: &ModelParams,
    v: ArrayView1<f64>,
    pattern: u64,
) -> Result<PatternEvidence> {
    let n = params.n_hidden();
    let d = params.n_visible();
    let beta = params.visible_precision();
    let w = params.dictionary();

    let mut log_prior = 0.0;
    let mut active = Vec::new();
    for i in 0..n {
        let b = params.spike_bias()[i];
        if pattern_bit(pattern, i) {
            log_prior += b - log1pexp(b);
            active.push(i);
        } else {
            log_prior += -log1pexp(b);
        }
    }

    let mut slab_posterior_mean = Array1::zeros(n);
    let a = active.len();
    if a == 0 {
        // v ~ N(0, diag(1/beta)); no active slabs.
        let log_likelihood = v
            .iter()
            .zip(beta.iter())
            .map(|(&vd, &bd)| gaussian_log_pdf(vd, 0.0, 1.0 / bd))
            .sum();
        return Ok(PatternEvidence {
            log_prior,
            log_likelihood,
            slab_posterior_mean,
        });
    }

    // M_A = diag(alpha_A) + W_A' B W_A, the active-slab posterior precision.
    let mut m = nalgebra::DMatrix::zeros(a, a);
    for (r, &i) in active.iter().enumerate() {
        for (c, &j) in active.iter().enumerate() {
            let mut g = 0.0;
            for dd in 0..d {
                g += beta[dd] * w[(dd, i)] * w[(dd, j)];
            }
            if r == c {
                g += params.slab_precision()[i];
            }
            m[(r, c)] = g;
        }
    }
    let chol = nalgebra::Cholesky::new(m)
        .ok_or(S3cError::SingularCovariance { pattern })?;

    // r = v - W_A mu_A, the residual against the prior mean of v | h.
    let mut residual = v.to_owned();
    for &i in &active {
        let mu = params.slab_mean()[i];
        for dd in 0..d {
            residual[dd] -= w[(dd, i)] * mu;
        }
    }
    let weighted: Array1<f64> = (&residual * beta).to_owned();
    let quad_full: f64 = residual.dot(&weighted);
    // t = W_A' B r
    let mut t = nalgebra::DVector::zeros(a);
    for (r_idx, &i) in active.iter().enumerate() {
        let mut acc = 0.0;
        for dd in 0..d {
            acc += w[(dd, i)] * weighted[dd];
        }
        t[r_idx] = acc;
    }
    let m_inv_t = chol.solve(&t);
    // Quadratic form r' Sigma^{-1} r via Woodbury.
    let quad = quad_full - t.dot(&m_inv_t);
    // log |Sigma| via the matrix determinant lemma.
    let log_det_m = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let log_det_sigma = log_det_m
        - active
            .iter()
            .map(|&i| params.slab_precision()[i].ln())
            .sum::<f64>()
        - beta.iter().map(|b| b.ln()).sum::<f64>();
    let log_likelihood = -0.5
        * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det_sigma + quad);

    // Posterior slab mean: M_A^{-1} (alpha_A o mu_A + W_A' B v).
    let weighted_v: Array1<f64> = v
        .iter()
        .zip(beta.iter())
        .map(|(&vd, &bd)| vd * bd)
        .collect();
    let mut rhs = nalgebra::DVector::zeros(a);
    for (r_idx, &i) in active.iter().enumerate() {
        let mut acc = params.slab_precision()[i] * params.slab_mean()[i];
        for dd in 0..d {
            acc += w[(dd, i)] * weighted_v[dd];
        }
        rhs[r_idx] = acc;
    }
    let mean = chol.solve(&rhs);
    for (r_idx, &i) in active.iter().enumerate() {
        slab_posterior_mean[i] = mean[r_idx];
    }

    Ok(PatternEvidence {
        log_prior,
        log_likelihood,
        slab_posterior_mean,
    })
}
