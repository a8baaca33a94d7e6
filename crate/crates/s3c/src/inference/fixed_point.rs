//! Damped parallel fixed-point E-step.
//!
//! Each iteration updates every slab value simultaneously from the current
//! state, clips sign-flipping overshoots, damps, then does the same parallel
//! damped update for the spike probabilities. Fast in practice but carries no
//! per-iteration improvement guarantee, unlike the CG slab phase.

use ndarray::ArrayView1;

use crate::error::{Result, S3cError};
use crate::model::ModelParams;

use super::trace::{InferenceTrace, TracePoint, UpdatePhase};
use super::{
    clip_reflections, count_active, damp, energy_functional, h_star_precomputed,
    init_state_precomputed, s_star_precomputed, EstepOutcome, InferenceConfig, Precomputed,
    VariationalState,
};

/// Runs `cfg.n_steps` iterations of the fixed-point scheme from the standard
/// initialization.
pub fn fixed_point_estep(
    params: &ModelParams,
    v: ArrayView1<f64>,
    cfg: &InferenceConfig,
) -> Result<EstepOutcome> {
    cfg.validate()?;
    let pre = Precomputed::new(params);
    let state = init_state_precomputed(params, &pre, cfg.eps_h);
    fixed_point_from(params, &pre, state, v, cfg)
}

pub(crate) fn fixed_point_from(
    params: &ModelParams,
    pre: &Precomputed,
    mut state: VariationalState,
    v: ArrayView1<f64>,
    cfg: &InferenceConfig,
) -> Result<EstepOutcome> {
    let v_term = pre.weighted_dictionary.t().dot(&v);
    let mut trace = InferenceTrace::default();
    for k in 0..cfg.n_steps {
        let star = s_star_precomputed(params, pre, &v_term, &state.spike_prob, &state.slab_mean);
        let clipped = clip_reflections(&star, &state.slab_mean, cfg.rho);
        state.slab_mean = damp(&clipped, &state.slab_mean, cfg.damping);
        if !state.slab_mean.iter().all(|x| x.is_finite()) {
            return Err(S3cError::NonFinite {
                context: "fixed-point slab update",
                iteration: k,
            });
        }
        if cfg.track_functional {
            trace.points.push(TracePoint {
                iteration: k,
                phase: UpdatePhase::Slab,
                functional: energy_functional(params, &state, v),
                active_at_half: count_active(&state.spike_prob, 0.5),
                active_at_hundredth: count_active(&state.spike_prob, 0.01),
            });
        }

        let h_opt = h_star_precomputed(params, pre, &v_term, &state.spike_prob, &state.slab_mean);
        let damped = damp(&h_opt, &state.spike_prob, cfg.damping);
        let new_spike = damped.mapv(|h| h.clamp(cfg.eps_h, 1.0 - cfg.eps_h));
        let max_delta = new_spike
            .iter()
            .zip(state.spike_prob.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        state.spike_prob = new_spike;
        if !state.spike_prob.iter().all(|x| x.is_finite()) {
            return Err(S3cError::NonFinite {
                context: "fixed-point spike update",
                iteration: k,
            });
        }
        if cfg.track_functional {
            trace.points.push(TracePoint {
                iteration: k,
                phase: UpdatePhase::Spike,
                functional: energy_functional(params, &state, v),
                active_at_half: count_active(&state.spike_prob, 0.5),
                active_at_hundredth: count_active(&state.spike_prob, 0.01),
            });
        }
        if let Some(tol) = cfg.convergence_tol {
            if max_delta < tol {
                break;
            }
        }
    }
    Ok(EstepOutcome {
        state,
        trace,
        cg_restarts: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{clip_reflections, h_star, init_state, s_star};
    use crate::test_support::{orthogonal_params, random_params, random_vector};
    use approx::assert_relative_eq;
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_undamped_step_is_one_coordinate_update() {
        // eta = 1, K = 1, N = 1: the outcome is exactly clip(s*) then h*.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let params = random_params(3, 1, &mut rng);
        let v = random_vector(3, &mut rng);
        let cfg = InferenceConfig {
            n_steps: 1,
            damping: 1.0,
            ..InferenceConfig::default()
        };
        let out = fixed_point_estep(&params, v.view(), &cfg).unwrap();

        let state0 = init_state(&params);
        let star = s_star(&params, &state0, v.view());
        let s1 = clip_reflections(&star, &state0.slab_mean, cfg.rho);
        let h1 = h_star(&params, &state0, &s1, v.view());
        assert_relative_eq!(out.state.slab_mean[0], s1[0], epsilon = 1e-12);
        assert_relative_eq!(
            out.state.spike_prob[0],
            h1[0].clamp(cfg.eps_h, 1.0 - cfg.eps_h),
            epsilon = 1e-12
        );
    }

    #[test]
    fn recovers_strongly_active_unit() {
        // One unit biased firmly on, the rest firmly off; v sampled from the
        // model. The E-step must agree with the exact posterior marginal.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut params = orthogonal_params(8, 4, -5.0, 1.5, 4.0, 25.0, &mut rng);
        let (w, mut b, mu, alpha, beta) = params.clone().into_parts();
        b[1] = 5.0;
        params = crate::model::ModelParams::new(w, b, mu, alpha, beta).unwrap();

        let sample = &params.sample(1, 7)[0];
        assert_eq!(sample.spike[1], 1.0, "seed chosen so unit 1 fires");
        let cfg = InferenceConfig {
            n_steps: 50,
            track_functional: true,
            ..InferenceConfig::default()
        };
        let out = fixed_point_estep(&params, sample.visible.view(), &cfg).unwrap();
        assert!(
            out.state.spike_prob[1] > 0.9,
            "active unit inferred at {}",
            out.state.spike_prob[1]
        );
        let exact = crate::inference::exact_posterior(&params, sample.visible.view()).unwrap();
        assert!(
            (out.state.spike_prob[1] - exact.spike_marginal[1]).abs() < 0.05,
            "fixed point {} vs exact {}",
            out.state.spike_prob[1],
            exact.spike_marginal[1]
        );
    }

    #[test]
    fn functional_approaches_log_marginal_on_well_conditioned_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let params = orthogonal_params(8, 4, -1.0, 1.0, 2.0, 9.0, &mut rng);
        let cfg = InferenceConfig {
            n_steps: 200,
            track_functional: true,
            ..InferenceConfig::default()
        };
        for sample in params.sample(5, 91) {
            let out = fixed_point_estep(&params, sample.visible.view(), &cfg).unwrap();
            let f = out.trace.final_functional().unwrap();
            let lm = params.exact_log_marginal(sample.visible.view()).unwrap();
            assert!(f <= lm + 1e-9);
            assert!(lm - f < 0.1, "gap {} too large", lm - f);
        }
    }

    #[test]
    fn clipping_keeps_correlated_dictionaries_bounded() {
        // Nearly collinear columns are the adversarial case for the parallel
        // update; with clipping the long run must stay within 10x the short
        // run's sup norm.
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let d = 6;
        let n = 8;
        let base = random_vector(d, &mut rng);
        let w = crate::test_support::unit_columns(ndarray::Array2::from_shape_fn(
            (d, n),
            |(dd, _)| base[dd] + 0.01 * rng.random_range(-1.0..1.0),
        ));
        let params = crate::model::ModelParams::with_scalar_beta(
            w,
            Array1::from_elem(n, 1.0),
            Array1::from_elem(n, 1.0),
            Array1::from_elem(n, 1.0),
            16.0,
        )
        .unwrap();
        let v = &base * 3.0;

        let sup = |steps: usize| {
            let cfg = InferenceConfig {
                n_steps: steps,
                damping: 1.0,
                ..InferenceConfig::default()
            };
            let out = fixed_point_estep(&params, v.view(), &cfg).unwrap();
            out.state
                .slab_mean
                .iter()
                .fold(0.0f64, |acc, &x| acc.max(x.abs()))
        };
        let short = sup(20);
        let long = sup(200);
        assert!(
            long <= 10.0 * short,
            "slab magnitudes grew: {short} at K=20, {long} at K=200"
        );
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let params = random_params(5, 4, &mut rng);
        let v = random_vector(5, &mut rng);
        let cfg = InferenceConfig::default();
        let out = fixed_point_estep(&params, v.view(), &cfg).unwrap();

        let perm = [3usize, 1, 0, 2];
        let w = params.dictionary();
        let permuted = crate::model::ModelParams::new(
            ndarray::Array2::from_shape_fn((5, 4), |(d, j)| w[(d, perm[j])]),
            Array1::from_shape_fn(4, |j| params.spike_bias()[perm[j]]),
            Array1::from_shape_fn(4, |j| params.slab_mean()[perm[j]]),
            Array1::from_shape_fn(4, |j| params.slab_precision()[perm[j]]),
            params.visible_precision().clone(),
        )
        .unwrap();
        let out_p = fixed_point_estep(&permuted, v.view(), &cfg).unwrap();
        for j in 0..4 {
            assert_relative_eq!(
                out_p.state.spike_prob[j],
                out.state.spike_prob[perm[j]],
                epsilon = 1e-12
            );
            assert_relative_eq!(
                out_p.state.slab_mean[j],
                out.state.slab_mean[perm[j]],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn early_stop_respects_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let params = random_params(4, 2, &mut rng);
        let v = random_vector(4, &mut rng);
        let cfg = InferenceConfig {
            n_steps: 500,
            convergence_tol: Some(1e-10),
            track_functional: true,
            ..InferenceConfig::default()
        };
        let out = fixed_point_estep(&params, v.view(), &cfg).unwrap();
        // Converged long before the cap.
        assert!(out.trace.iteration_points().count() < 500);
    }

    #[test]
    fn sparsification_over_trailing_iterations() {
        // On a model trained on its own sparse synthetic data, explaining
        // away prunes active units: the >0.5 count must be non-increasing
        // over the last half of inference for nearly all examples.
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let truth = orthogonal_params(12, 6, -2.0, 1.5, 6.0, 36.0, &mut rng);
        let cfg = InferenceConfig {
            n_steps: 40,
            track_functional: true,
            ..InferenceConfig::default()
        };
        let samples = truth.sample(40, 5);
        let mut ok = 0;
        for sample in &samples {
            let out = fixed_point_estep(&truth, sample.visible.view(), &cfg).unwrap();
            let counts: Vec<usize> = out
                .trace
                .iteration_points()
                .map(|p| p.active_at_half)
                .collect();
            let tail = &counts[counts.len() / 2..];
            if tail.windows(2).all(|w| w[1] <= w[0]) {
                ok += 1;
            }
        }
        assert!(
            ok * 10 >= samples.len() * 9,
            "monotone tail for only {ok}/{} examples",
            samples.len()
        );
    }
}
