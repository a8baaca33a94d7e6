//! Shared generators and slow reference implementations for tests.
//!
//! The loop oracles here evaluate the update formulas one unit at a time with
//! explicit excluded-unit sums, deliberately avoiding the vectorized
//! reconstruction shortcut used by the real kernels.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use crate::inference::VariationalState;
use crate::math::sigmoid;
use crate::model::ModelParams;

pub fn unit_columns(mut w: Array2<f64>) -> Array2<f64> {
    for mut col in w.axis_iter_mut(Axis(1)) {
        let norm = col.dot(&col).sqrt();
        if norm > 0.0 {
            col.mapv_inplace(|x| x / norm);
        }
    }
    w
}

pub fn random_vector(len: usize, rng: &mut impl Rng) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| rng.random_range(-2.0..2.0))
}

pub fn random_params(d: usize, n: usize, rng: &mut impl Rng) -> ModelParams {
    let w = unit_columns(Array2::from_shape_fn((d, n), |_| {
        rng.random_range(-1.0..1.0) + 0.05
    }));
    let b = Array1::from_shape_fn(n, |_| rng.random_range(-2.0..2.0));
    let mu = Array1::from_shape_fn(n, |_| rng.random_range(-1.5..1.5));
    let alpha = Array1::from_shape_fn(n, |_| rng.random_range(0.5..3.0));
    let beta = Array1::from_shape_fn(d, |_| rng.random_range(0.5..4.0));
    ModelParams::new(w, b, mu, alpha, beta).unwrap()
}

/// Parameters whose dictionary columns are exactly orthonormal.
pub fn orthogonal_params(
    d: usize,
    n: usize,
    bias: f64,
    mu: f64,
    alpha: f64,
    beta: f64,
    rng: &mut impl Rng,
) -> ModelParams {
    let w = orthonormal_columns(d, n, rng);
    ModelParams::with_scalar_beta(
        w,
        Array1::from_elem(n, bias),
        Array1::from_elem(n, mu),
        Array1::from_elem(n, alpha),
        beta,
    )
    .unwrap()
}

/// First `n` columns of a random orthonormal basis of R^d (Gram-Schmidt).
pub fn orthonormal_columns(d: usize, n: usize, rng: &mut impl Rng) -> Array2<f64> {
    assert!(n <= d);
    let mut cols: Vec<Array1<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
        for c in &cols {
            let proj = v.dot(c);
            v = &v - &(c * proj);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            cols.push(v / norm);
        }
    }
    let mut w = Array2::zeros((d, n));
    for (j, c) in cols.iter().enumerate() {
        w.column_mut(j).assign(c);
    }
    w
}

pub fn random_state(params: &ModelParams, rng: &mut impl Rng) -> VariationalState {
    let mut state = crate::inference::init_state(params);
    let n = params.n_hidden();
    state.spike_prob = Array1::from_shape_fn(n, |_| rng.random_range(0.05..0.95));
    state.slab_mean = Array1::from_shape_fn(n, |_| rng.random_range(-2.0..2.0));
    state
}

/// Per-unit slab update with the excluded sum assembled index by index.
pub fn s_star_loop(
    params: &ModelParams,
    state: &VariationalState,
    v: ArrayView1<f64>,
) -> Array1<f64> {
    let n = params.n_hidden();
    let d = params.n_visible();
    let w = params.dictionary();
    let beta = params.visible_precision();
    let mut out = Array1::zeros(n);
    for i in 0..n {
        let mut others = Array1::zeros(d);
        for j in 0..n {
            if j == i {
                continue;
            }
            for dd in 0..d {
                others[dd] += w[(dd, j)] * state.spike_prob[j] * state.slab_mean[j];
            }
        }
        let mut v_term = 0.0;
        let mut cross = 0.0;
        let mut gram = 0.0;
        for dd in 0..d {
            v_term += v[dd] * beta[dd] * w[(dd, i)];
            cross += w[(dd, i)] * beta[dd] * others[dd];
            gram += beta[dd] * w[(dd, i)] * w[(dd, i)];
        }
        out[i] = (params.slab_mean()[i] * params.slab_precision()[i] + v_term - cross)
            / (params.slab_precision()[i] + gram);
    }
    out
}

/// Per-unit spike update with the excluded sum assembled index by index.
pub fn h_star_loop(
    params: &ModelParams,
    state: &VariationalState,
    s_new: &Array1<f64>,
    v: ArrayView1<f64>,
) -> Array1<f64> {
    let n = params.n_hidden();
    let d = params.n_visible();
    let w = params.dictionary();
    let beta = params.visible_precision();
    let mut out = Array1::zeros(n);
    for i in 0..n {
        let mut inner = Array1::zeros(d);
        for dd in 0..d {
            inner[dd] = v[dd] - 0.5 * w[(dd, i)] * s_new[i];
        }
        for j in 0..n {
            if j == i {
                continue;
            }
            for dd in 0..d {
                inner[dd] -= w[(dd, j)] * s_new[j] * state.spike_prob[j];
            }
        }
        let mut recon = 0.0;
        let mut gram = 0.0;
        for dd in 0..d {
            recon += inner[dd] * beta[dd] * w[(dd, i)] * s_new[i];
            gram += beta[dd] * w[(dd, i)] * w[(dd, i)];
        }
        let alpha = params.slab_precision()[i];
        let slab = 0.5 * alpha * (s_new[i] - params.slab_mean()[i]).powi(2);
        let logs = -0.5 * (alpha + gram).ln() + 0.5 * alpha.ln();
        out[i] = sigmoid(recon + params.spike_bias()[i] - slab + logs);
    }
    out
}
