//! Variational inference for the spike-and-slab model.
//!
//! The approximating family factorizes over hidden units and ties each slab
//! to its spike:
//!
//! ```text
//! Q(h_i = 1)   = h_hat_i
//! Q(s_i | h_i) = N(s_i | h_i * s_hat_i, (alpha_i + h_i * W_i' B W_i)^{-1})
//! ```
//!
//! Two E-steps drive `(h_hat, s_hat)` toward the posterior: a damped parallel
//! fixed-point scheme with reflection clipping, and a conjugate-gradient
//! scheme that exactly ascends the slab-quadratic part of the bound before
//! each damped spike update. Both maximize the energy functional F, a lower
//! bound on `log p(v)`.

mod batch;
mod cg;
mod exact;
mod fixed_point;
mod functional;
mod trace;

pub use batch::{run_estep_batch, run_estep_batch_from, BatchEstep, BatchStates};
pub use cg::cg_estep;
pub use exact::{exact_posterior, exact_posterior_with_limit, ExactPosterior, PatternPosterior};
pub use fixed_point::fixed_point_estep;
pub use functional::energy_functional;
pub(crate) use functional::expected_log_joint;
pub use trace::{InferenceTrace, TracePoint, UpdatePhase};

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Result, S3cError};
use crate::math::{sigmoid, sign_pos};
use crate::model::ModelParams;

/// Default clamp keeping spike probabilities strictly inside (0, 1).
pub const DEFAULT_EPS_H: f64 = 1e-7;

/// Which E-step scheme to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstepMethod {
    FixedPoint,
    ConjugateGradient,
}

/// Settings shared by both E-step schemes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Number of outer inference iterations K.
    pub n_steps: usize,
    /// Damping coefficient eta in (0, 1] blending new and previous values.
    pub damping: f64,
    /// Reflection clip coefficient rho in [0, 1].
    pub rho: f64,
    pub method: EstepMethod,
    /// Conjugate-gradient steps per outer iteration (CG method only).
    pub cg_steps_per_iteration: usize,
    /// Record the functional after every update when true.
    pub track_functional: bool,
    /// Clamp for spike probabilities.
    pub eps_h: f64,
    /// Optional early stop on `max |delta h_hat| < tol`; off by default.
    pub convergence_tol: Option<f64>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            n_steps: 20,
            damping: 0.5,
            rho: 0.5,
            method: EstepMethod::FixedPoint,
            cg_steps_per_iteration: 3,
            track_functional: false,
            eps_h: DEFAULT_EPS_H,
            convergence_tol: None,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(S3cError::InvalidConfig("n_steps must be >= 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(S3cError::InvalidConfig(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(S3cError::InvalidConfig(format!(
                "rho must lie in [0, 1], got {}",
                self.rho
            )));
        }
        if self.cg_steps_per_iteration == 0 {
            return Err(S3cError::InvalidConfig(
                "cg_steps_per_iteration must be >= 1".into(),
            ));
        }
        if !(self.eps_h > 0.0 && self.eps_h < 0.5) {
            return Err(S3cError::InvalidConfig(format!(
                "eps_h must lie in (0, 0.5), got {}",
                self.eps_h
            )));
        }
        Ok(())
    }
}

/// Per-example variational parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    /// h_hat: Q(h_i = 1), clamped inside (0, 1).
    pub spike_prob: Array1<f64>,
    /// s_hat: mean of Q(s_i | h_i = 1).
    pub slab_mean: Array1<f64>,
    /// Variance of Q(s_i | h_i = 1): (alpha_i + W_i' B W_i)^{-1}.
    pub slab_var_on: Array1<f64>,
    /// Variance of Q(s_i | h_i = 0): alpha_i^{-1}.
    pub slab_var_off: Array1<f64>,
}

impl VariationalState {
    /// Recomputes the slab variances implied by `params`, leaving the means
    /// untouched. Used when warm-starting a state under updated parameters.
    pub fn refresh_variances(&mut self, params: &ModelParams) {
        let pre = Precomputed::new(params);
        self.slab_var_on = pre.slab_var_on;
        self.slab_var_off = pre.slab_var_off;
    }
}

/// Quantities derived from the parameters once per inference run.
#[derive(Debug, Clone)]
pub(crate) struct Precomputed {
    /// diag(beta) * W, D x N.
    pub weighted_dictionary: ndarray::Array2<f64>,
    /// w2_i = W_i' B W_i.
    pub unit_gram: Array1<f64>,
    /// alpha_i + w2_i, the precision of Q(s_i | h_i = 1).
    pub on_precision: Array1<f64>,
    pub slab_var_on: Array1<f64>,
    pub slab_var_off: Array1<f64>,
    /// 0.5 (ln alpha_i - ln(alpha_i + w2_i)), the spike-update log-variance term.
    pub half_log_var_ratio: Array1<f64>,
}

impl Precomputed {
    pub fn new(params: &ModelParams) -> Self {
        let w = params.dictionary();
        let beta = params.visible_precision();
        let mut weighted = w.clone();
        for (mut row, &b) in weighted.outer_iter_mut().zip(beta.iter()) {
            row.mapv_inplace(|x| x * b);
        }
        let unit_gram: Array1<f64> = w
            .columns()
            .into_iter()
            .zip(weighted.columns())
            .map(|(wc, bc)| wc.dot(&bc))
            .collect();
        let alpha = params.slab_precision();
        let on_precision = alpha + &unit_gram;
        let slab_var_on = on_precision.mapv(f64::recip);
        let slab_var_off = alpha.mapv(f64::recip);
        let half_log_var_ratio: Array1<f64> = alpha
            .iter()
            .zip(on_precision.iter())
            .map(|(&a, &p)| 0.5 * (a.ln() - p.ln()))
            .collect();
        Self {
            weighted_dictionary: weighted,
            unit_gram,
            on_precision,
            slab_var_on,
            slab_var_off,
            half_log_var_ratio,
        }
    }
}

/// Initial state of Algorithm-style inference: `h_hat = sigmoid(b)`,
/// `s_hat = mu`, with variances fixed by the parameters.
pub fn init_state(params: &ModelParams) -> VariationalState {
    init_state_with_eps(params, DEFAULT_EPS_H)
}

pub(crate) fn init_state_with_eps(params: &ModelParams, eps_h: f64) -> VariationalState {
    let pre = Precomputed::new(params);
    init_state_precomputed(params, &pre, eps_h)
}

pub(crate) fn init_state_precomputed(
    params: &ModelParams,
    pre: &Precomputed,
    eps_h: f64,
) -> VariationalState {
    let spike_prob = params
        .spike_bias()
        .mapv(|b| sigmoid(b).clamp(eps_h, 1.0 - eps_h));
    VariationalState {
        spike_prob,
        slab_mean: params.slab_mean().clone(),
        slab_var_on: pre.slab_var_on.clone(),
        slab_var_off: pre.slab_var_off.clone(),
    }
}

/// Individually optimal slab values, computed for every unit in parallel
/// from the current state:
///
/// ```text
/// s*_i = (mu_i alpha_i + v' B W_i - W_i' B [sum_{j != i} W_j h_hat_j s_hat_j])
///        / (alpha_i + W_i' B W_i)
/// ```
///
/// The excluded-unit sum is realized as the full weighted reconstruction
/// minus the unit's own contribution.
pub fn s_star(params: &ModelParams, state: &VariationalState, v: ArrayView1<f64>) -> Array1<f64> {
    let pre = Precomputed::new(params);
    let v_term = pre.weighted_dictionary.t().dot(&v);
    s_star_precomputed(params, &pre, &v_term, &state.spike_prob, &state.slab_mean)
}

pub(crate) fn s_star_precomputed(
    params: &ModelParams,
    pre: &Precomputed,
    v_term: &Array1<f64>,
    spike_prob: &Array1<f64>,
    slab_mean: &Array1<f64>,
) -> Array1<f64> {
    let code = spike_prob * slab_mean;
    let reconstruction = params.dictionary().dot(&code);
    let cross = pre.weighted_dictionary.t().dot(&reconstruction);
    let numerator =
        params.slab_mean() * params.slab_precision() + v_term - &cross + &(&pre.unit_gram * &code);
    numerator / &pre.on_precision
}

/// Reflection clipping: where the candidate flips sign against the previous
/// value and overshoots `rho * |previous|`, its magnitude is cut back to
/// exactly that bound; all other entries pass through. The sign of zero is
/// treated as positive.
pub fn clip_reflections(s_star: &Array1<f64>, s_prev: &Array1<f64>, rho: f64) -> Array1<f64> {
    Array1::from_shape_fn(s_star.len(), |i| {
        let star = s_star[i];
        let prev = s_prev[i];
        if sign_pos(star) != sign_pos(prev) && star.abs() > rho * prev.abs() {
            rho * sign_pos(star) * prev.abs()
        } else {
            star
        }
    })
}

/// Individually optimal spike probabilities given freshly updated slab values
/// `s_new` and the pre-update spike probabilities carried by `state`:
///
/// ```text
/// h*_i = sigmoid( (v - sum_{j != i} W_j s_new_j h_hat_j - W_i s_new_i / 2)' B W_i s_new_i
///                 + b_i - alpha_i (s_new_i - mu_i)^2 / 2
///                 - ln(alpha_i + W_i' B W_i) / 2 + ln(alpha_i) / 2 )
/// ```
pub fn h_star(
    params: &ModelParams,
    state: &VariationalState,
    s_new: &Array1<f64>,
    v: ArrayView1<f64>,
) -> Array1<f64> {
    let pre = Precomputed::new(params);
    let v_term = pre.weighted_dictionary.t().dot(&v);
    h_star_precomputed(params, &pre, &v_term, &state.spike_prob, s_new)
}

pub(crate) fn h_star_precomputed(
    params: &ModelParams,
    pre: &Precomputed,
    v_term: &Array1<f64>,
    spike_prob: &Array1<f64>,
    s_new: &Array1<f64>,
) -> Array1<f64> {
    let code = spike_prob * s_new;
    let reconstruction = params.dictionary().dot(&code);
    let cross = pre.weighted_dictionary.t().dot(&reconstruction);
    let n = s_new.len();
    Array1::from_shape_fn(n, |i| {
        let recon_term =
            (v_term[i] - cross[i] + pre.unit_gram[i] * code[i] - 0.5 * pre.unit_gram[i] * s_new[i])
                * s_new[i];
        let slab_penalty = {
            let d = s_new[i] - params.slab_mean()[i];
            0.5 * params.slab_precision()[i] * d * d
        };
        sigmoid(recon_term + params.spike_bias()[i] - slab_penalty + pre.half_log_var_ratio[i])
    })
}

/// First and second moments of the variational posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMoments {
    /// E[h_i] = h_hat_i.
    pub e_h: Array1<f64>,
    /// E[h_i s_i] = h_hat_i s_hat_i.
    pub e_hs: Array1<f64>,
    /// E[h_i s_i^2] = h_hat_i (s_hat_i^2 + var_on_i).
    pub e_hs2: Array1<f64>,
    /// E[s_i^2] = e_hs2_i + (1 - h_hat_i) var_off_i.
    pub e_s2: Array1<f64>,
}

/// Moments of the factorized family carried by `state`.
pub fn compute_moments(params: &ModelParams, state: &VariationalState) -> Result<PosteriorMoments> {
    if state.spike_prob.len() != params.n_hidden() {
        return Err(S3cError::DimensionMismatch {
            context: "variational state",
            expected: params.n_hidden(),
            actual: state.spike_prob.len(),
        });
    }
    let e_h = state.spike_prob.clone();
    let e_hs = &state.spike_prob * &state.slab_mean;
    let e_hs2 = &state.spike_prob
        * &(&state.slab_mean * &state.slab_mean + &state.slab_var_on);
    let e_s2 = &e_hs2 + &(state.spike_prob.mapv(|h| 1.0 - h) * &state.slab_var_off);
    Ok(PosteriorMoments {
        e_h,
        e_hs,
        e_hs2,
        e_s2,
    })
}

/// Outcome of one E-step on a single example.
#[derive(Debug, Clone)]
pub struct EstepOutcome {
    pub state: VariationalState,
    /// Functional trace; empty unless `track_functional` was set.
    pub trace: InferenceTrace,
    /// Number of conjugate-gradient restarts forced by lost conjugacy.
    pub cg_restarts: usize,
}

/// Runs the E-step selected by `cfg.method`.
pub fn run_estep(
    params: &ModelParams,
    v: ArrayView1<f64>,
    cfg: &InferenceConfig,
) -> Result<EstepOutcome> {
    match cfg.method {
        EstepMethod::FixedPoint => fixed_point_estep(params, v, cfg),
        EstepMethod::ConjugateGradient => cg_estep(params, v, cfg),
    }
}

pub(crate) fn damp(new: &Array1<f64>, prev: &Array1<f64>, eta: f64) -> Array1<f64> {
    new * eta + &(prev * (1.0 - eta))
}

pub(crate) fn count_active(spike_prob: &Array1<f64>, threshold: f64) -> usize {
    spike_prob.iter().filter(|&&h| h > threshold).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::{random_params, random_state};
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_state_per_algorithm() {
        let params = ModelParams::with_scalar_beta(
            array![[1.0, 0.0], [0.0, 1.0]],
            array![0.0, 0.0],
            array![1.5, -2.0],
            array![1.0, 2.0],
            1.0,
        )
        .unwrap();
        let state = init_state(&params);
        assert_relative_eq!(state.spike_prob[0], 0.5);
        assert_relative_eq!(state.spike_prob[1], 0.5);
        assert_eq!(state.slab_mean, array![1.5, -2.0]);
        // alpha = 1, W unit norm, beta = 1 => var_on = 1/2, var_off = 1.
        assert_relative_eq!(state.slab_var_on[0], 0.5);
        assert_relative_eq!(state.slab_var_off[0], 1.0);
    }

    #[test]
    fn slab_variances_ordered_and_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = random_params(6, 4, &mut rng);
        let state = init_state(&params);
        let pre = Precomputed::new(&params);
        for i in 0..4 {
            assert!(state.slab_var_on[i] < state.slab_var_off[i]);
            assert_relative_eq!(state.slab_var_on[i], pre.slab_var_on[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn s_star_scalar_case() {
        // N=1, D=1, W=1, beta=1, alpha=1, mu=0, v=1 => s* = 1/2.
        let params = ModelParams::with_scalar_beta(
            array![[1.0]],
            array![0.0],
            array![0.0],
            array![1.0],
            1.0,
        )
        .unwrap();
        let state = init_state(&params);
        let star = s_star(&params, &state, array![1.0].view());
        assert_relative_eq!(star[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn s_star_self_consistent_input() {
        // v = mu * W with unit-norm W and beta = 1: s* = (mu alpha + mu) / (alpha + 1) = mu.
        let mu = 1.7;
        let params = ModelParams::with_scalar_beta(
            array![[0.6], [0.8]],
            array![0.3],
            array![mu],
            array![2.5],
            1.0,
        )
        .unwrap();
        let mut state = init_state(&params);
        state.spike_prob[0] = 1e-7; // suppress the self-reconstruction term
        state.slab_mean[0] = 0.0;
        let v = array![0.6 * mu, 0.8 * mu];
        let star = s_star(&params, &state, v.view());
        assert_relative_eq!(star[0], mu, epsilon = 1e-6);
    }

    #[test]
    fn s_star_matches_sequential_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let params = random_params(5, 3, &mut rng);
        let state = random_state(&params, &mut rng);
        let v = crate::test_support::random_vector(5, &mut rng);
        let fast = s_star(&params, &state, v.view());
        let slow = crate::test_support::s_star_loop(&params, &state, v.view());
        for i in 0..3 {
            assert_relative_eq!(fast[i], slow[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn clip_rule_truth_table() {
        // Sign flip and overshoot: clipped to rho * |prev| with the new sign.
        let c = clip_reflections(&array![-2.0], &array![1.0], 0.5);
        assert_relative_eq!(c[0], -0.5);
        // Sign flip without overshoot: pass through.
        let c = clip_reflections(&array![-0.3], &array![1.0], 0.5);
        assert_relative_eq!(c[0], -0.3);
        // No sign flip: pass through regardless of magnitude.
        let c = clip_reflections(&array![4.0], &array![1.0], 0.5);
        assert_relative_eq!(c[0], 4.0);
    }

    #[test]
    fn clip_rule_zero_candidate_never_clips() {
        let c = clip_reflections(&array![0.0], &array![-1.0], 0.5);
        assert_relative_eq!(c[0], 0.0);
        let c = clip_reflections(&array![0.0], &array![1.0], 0.5);
        assert_relative_eq!(c[0], 0.0);
    }

    #[test]
    fn h_star_scalar_case() {
        // s_new = 0, b = 0, mu = 0, alpha = 1, unit-norm W, beta = 1:
        // argument = -ln(2)/2, h* = 1 / (1 + sqrt(2)).
        let params = ModelParams::with_scalar_beta(
            array![[1.0]],
            array![0.0],
            array![0.0],
            array![1.0],
            1.0,
        )
        .unwrap();
        let state = init_state(&params);
        let h = h_star(&params, &state, &array![0.0], array![0.7].view());
        assert_relative_eq!(h[0], 1.0 / (1.0 + 2f64.sqrt()), epsilon = 1e-12);
        assert_relative_eq!(h[0], 0.41421, epsilon = 1e-5);
    }

    #[test]
    fn h_star_saturates_with_large_negative_bias() {
        let params = ModelParams::with_scalar_beta(
            array![[1.0]],
            array![-30.0],
            array![0.0],
            array![1.0],
            1.0,
        )
        .unwrap();
        let state = init_state(&params);
        let h = h_star(&params, &state, &array![0.1], array![0.5].view());
        assert!(h[0] < 1e-10);
    }

    #[test]
    fn h_star_matches_sequential_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let params = random_params(5, 3, &mut rng);
        let state = random_state(&params, &mut rng);
        let v = crate::test_support::random_vector(5, &mut rng);
        let s_new = crate::test_support::random_vector(3, &mut rng);
        let fast = h_star(&params, &state, &s_new, v.view());
        let slow = crate::test_support::h_star_loop(&params, &state, &s_new, v.view());
        for i in 0..3 {
            assert_relative_eq!(fast[i], slow[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn moments_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let params = random_params(4, 2, &mut rng);
        let mut state = init_state(&params);
        state.spike_prob = array![1.0 - 1e-7, 1e-7];
        state.slab_mean = array![2.0, 3.0];
        state.slab_var_on = array![0.5, 0.25];
        state.slab_var_off = array![1.0, 2.0];
        let m = compute_moments(&params, &state).unwrap();
        assert_relative_eq!(m.e_hs[0], 2.0, epsilon = 1e-6);
        assert_relative_eq!(m.e_hs2[0], 4.5, epsilon = 1e-5);
        // Spike effectively off: e_hs ~ 0, e_s2 ~ var_off.
        assert!(m.e_hs[1].abs() < 1e-5);
        assert_relative_eq!(m.e_s2[1], 2.0, epsilon = 1e-5);
    }

    #[test]
    fn moments_match_monte_carlo_from_q() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let params = random_params(4, 2, &mut rng);
        let state = random_state(&params, &mut rng);
        let m = compute_moments(&params, &state).unwrap();

        let n_samples = 100_000;
        for i in 0..2 {
            let mut sum_hs = 0.0;
            let mut sum_hs2 = 0.0;
            let mut sum_s2 = 0.0;
            for _ in 0..n_samples {
                let h = rng.random_bool(state.spike_prob[i]);
                let (mean, var) = if h {
                    (state.slab_mean[i], state.slab_var_on[i])
                } else {
                    (0.0, state.slab_var_off[i])
                };
                let s: f64 = Normal::new(mean, var.sqrt()).unwrap().sample(&mut rng);
                if h {
                    sum_hs += s;
                    sum_hs2 += s * s;
                }
                sum_s2 += s * s;
            }
            let inv = 1.0 / n_samples as f64;
            // Crude 3-sigma bands; second moments have heavier tails.
            assert!((sum_hs * inv - m.e_hs[i]).abs() < 0.05);
            assert!((sum_hs2 * inv - m.e_hs2[i]).abs() < 0.15);
            assert!((sum_s2 * inv - m.e_s2[i]).abs() < 0.15);
        }
    }

    #[test]
    fn moments_jensen_inequalities() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for _ in 0..20 {
            let params = random_params(4, 3, &mut rng);
            let state = random_state(&params, &mut rng);
            let m = compute_moments(&params, &state).unwrap();
            for i in 0..3 {
                let lower = m.e_hs[i] * m.e_hs[i] / m.e_h[i].max(DEFAULT_EPS_H);
                assert!(m.e_hs2[i] >= lower - 1e-12);
                assert!(m.e_s2[i] >= m.e_hs2[i] - 1e-12);
                assert!(m.e_hs2[i] >= 0.0 && m.e_s2[i] >= 0.0);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = InferenceConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.damping = 0.0;
        assert!(cfg.validate().is_err());
        cfg.damping = 0.5;
        cfg.rho = 1.5;
        assert!(cfg.validate().is_err());
        cfg.rho = 0.5;
        cfg.n_steps = 0;
        assert!(cfg.validate().is_err());
    }
}
