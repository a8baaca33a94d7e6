//! The energy functional F(Q) = E_Q[log p(v, s, h)] + H(Q).
//!
//! Closed form under the tied spike-and-slab family. With
//! `m_i = h_hat_i s_hat_i`, `e_hs2_i = h_hat_i (s_hat_i^2 + var_on_i)` and
//! `code_var_i = e_hs2_i - m_i^2`, the expected log joint is
//!
//! ```text
//! sum_i [ h_hat_i b_i - ln(1 + e^{b_i}) ]
//! + sum_i [ ln(alpha_i / 2pi) / 2
//!           - alpha_i (e_s2_i - 2 mu_i m_i + mu_i^2 h_hat_i) / 2 ]
//! + sum_d [ ln(beta_d / 2pi) / 2 ]
//! - ( (v - W m)' B (v - W m) + sum_i W_i' B W_i code_var_i ) / 2
//! ```
//!
//! and the entropy adds a Bernoulli term plus the spike-weighted mixture of
//! the two conditional Gaussian entropies per unit. The slab variances are
//! read from the state, never recomputed, so the expression is an exact
//! function of (Q, theta) — the property the M-step gradients rely on.

use ndarray::ArrayView1;

use crate::math::{bernoulli_entropy, gaussian_entropy, log1pexp};
use crate::model::ModelParams;

use super::VariationalState;

/// E_Q[log p(v, s, h)]: the parameter-dependent part of the functional.
pub(crate) fn expected_log_joint(
    params: &ModelParams,
    state: &VariationalState,
    v: ArrayView1<f64>,
) -> f64 {
    let n = params.n_hidden();
    let d = params.n_visible();
    let w = params.dictionary();
    let beta = params.visible_precision();
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();

    let mut total = 0.0;
    let code = &state.spike_prob * &state.slab_mean;

    for i in 0..n {
        let h = state.spike_prob[i];
        let s = state.slab_mean[i];
        let b = params.spike_bias()[i];
        let mu = params.slab_mean()[i];
        let alpha = params.slab_precision()[i];

        total += h * b - log1pexp(b);

        let e_hs2 = h * (s * s + state.slab_var_on[i]);
        let e_s2 = e_hs2 + (1.0 - h) * state.slab_var_off[i];
        let quad = e_s2 - 2.0 * mu * code[i] + mu * mu * h;
        total += 0.5 * (alpha.ln() - ln_2pi) - 0.5 * alpha * quad;
    }

    let reconstruction = w.dot(&code);
    let mut recon_quad = 0.0;
    for dd in 0..d {
        let r = v[dd] - reconstruction[dd];
        recon_quad += beta[dd] * r * r;
        total += 0.5 * (beta[dd].ln() - ln_2pi);
    }
    let mut var_quad = 0.0;
    for i in 0..n {
        let h = state.spike_prob[i];
        let s = state.slab_mean[i];
        let code_var = h * (s * s + state.slab_var_on[i]) - code[i] * code[i];
        let mut gram = 0.0;
        for dd in 0..d {
            gram += beta[dd] * w[(dd, i)] * w[(dd, i)];
        }
        var_quad += gram * code_var;
    }
    total - 0.5 * (recon_quad + var_quad)
}

/// Joint entropy of the variational family.
pub(crate) fn entropy(state: &VariationalState) -> f64 {
    let mut total = 0.0;
    for i in 0..state.spike_prob.len() {
        let h = state.spike_prob[i];
        total += bernoulli_entropy(h)
            + h * gaussian_entropy(state.slab_var_on[i])
            + (1.0 - h) * gaussian_entropy(state.slab_var_off[i]);
    }
    total
}

/// The energy functional F(Q), a lower bound on `log p(v)` for any valid
/// state.
pub fn energy_functional(
    params: &ModelParams,
    state: &VariationalState,
    v: ArrayView1<f64>,
) -> f64 {
    expected_log_joint(params, state, v) + entropy(state)
}
