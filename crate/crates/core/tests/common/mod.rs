//! Independent oracles used by the integration and acceptance suites.
//! Each reimplements the checked quantity by a different route than the
//! library: exhaustive enumeration for DTW, dense joint-Gaussian algebra
//! for the state-space model, and closed-form normal equations for WLS.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use turfimpact::bsts::LocalTrendParams;

/// Exhaustive minimum-cost warping path: every monotone path from (0,0) to
/// (n-1,n-1) with steps {right, down, diagonal} inside the |i-j| <= w band,
/// cost summed over all visited cells with unit step weights.
pub fn dtw_brute_force(a: &[f64], b: &[f64], w: usize) -> f64 {
    assert_eq!(a.len(), b.len());
    fn walk(a: &[f64], b: &[f64], w: usize, i: usize, j: usize, acc: f64, best: &mut f64) {
        let n = a.len();
        let acc = acc + (a[i] - b[j]).abs();
        if acc >= *best {
            return; // every extension only adds cost
        }
        if i == n - 1 && j == n - 1 {
            *best = acc;
            return;
        }
        let in_band = |i: usize, j: usize| i.abs_diff(j) <= w;
        if i + 1 < n && j + 1 < n && in_band(i + 1, j + 1) {
            walk(a, b, w, i + 1, j + 1, acc, best);
        }
        if i + 1 < n && in_band(i + 1, j) {
            walk(a, b, w, i + 1, j, acc, best);
        }
        if j + 1 < n && in_band(i, j + 1) {
            walk(a, b, w, i, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, w, 0, 0, 0.0, &mut best);
    best
}

fn transition() -> Matrix2<f64> {
    Matrix2::new(1.0, 1.0, 0.0, 1.0)
}

/// Joint mean and covariance of the states (s_1..s_T stacked) under the
/// local linear trend model, by direct propagation.
fn joint_state_moments(params: &LocalTrendParams, t_len: usize) -> (Vec<Vector2<f64>>, Vec<Vec<Matrix2<f64>>>) {
    let phi = transition();
    let q = Matrix2::new(params.level_var, 0.0, 0.0, params.slope_var);
    let m0 = Vector2::new(params.init_mean[0], params.init_mean[1]);
    let p0 = Matrix2::new(params.init_var[0], 0.0, 0.0, params.init_var[1]);

    // powers of the transition matrix
    let mut powers = vec![Matrix2::identity()];
    for k in 1..t_len {
        powers.push(phi * powers[k - 1]);
    }

    let means: Vec<Vector2<f64>> = (0..t_len).map(|t| powers[t] * m0).collect();
    // cov(s_a, s_b) = Phi^(a-1) P0 Phi^(b-1)' + sum_{k=2..min} Phi^(a-k) Q Phi^(b-k)'
    let mut cov = vec![vec![Matrix2::zeros(); t_len]; t_len];
    for a in 0..t_len {
        for b in 0..t_len {
            let mut c = powers[a] * p0 * powers[b].transpose();
            for k in 1..=a.min(b) {
                c += powers[a - k] * q * powers[b - k].transpose();
            }
            cov[a][b] = c;
        }
    }
    (means, cov)
}

/// Exact log-density of the observations as one multivariate normal built
/// from the joint state covariance. Independent of any filtering recursion.
pub fn dense_loglik(params: &LocalTrendParams, y: &[f64]) -> f64 {
    let t_len = y.len();
    let (means, cov) = joint_state_moments(params, t_len);
    let mu = DVector::from_fn(t_len, |t, _| means[t][0]);
    let mut sigma = DMatrix::from_fn(t_len, t_len, |a, b| cov[a][b][(0, 0)]);
    for t in 0..t_len {
        sigma[(t, t)] += params.obs_var;
    }
    let chol = nalgebra::Cholesky::new(sigma).expect("oracle covariance not PD");
    let resid = DVector::from_column_slice(y) - mu;
    let solved = chol.solve(&resid);
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (t_len as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + resid.dot(&solved))
}

/// Exact smoother mean E[state_t | y_1..T] for every t, by conditioning the
/// joint Gaussian of (states, observations).
pub fn dense_smoother_mean(params: &LocalTrendParams, y: &[f64]) -> Vec<[f64; 2]> {
    let t_len = y.len();
    let (means, cov) = joint_state_moments(params, t_len);
    let mu_y = DVector::from_fn(t_len, |t, _| means[t][0]);
    let mut sigma_yy = DMatrix::from_fn(t_len, t_len, |a, b| cov[a][b][(0, 0)]);
    for t in 0..t_len {
        sigma_yy[(t, t)] += params.obs_var;
    }
    let chol = nalgebra::Cholesky::new(sigma_yy).expect("oracle covariance not PD");
    let innov = chol.solve(&(DVector::from_column_slice(y) - mu_y));
    (0..t_len)
        .map(|t| {
            // cov(s_t, y_b) = cov(s_t, s_b) column 0
            let mut level = means[t][0];
            let mut slope = means[t][1];
            for b in 0..t_len {
                level += cov[t][b][(0, 0)] * innov[b];
                slope += cov[t][b][(1, 0)] * innov[b];
            }
            [level, slope]
        })
        .collect()
}

/// Closed-form weighted least squares: beta = (X'WX)^-1 X'Wy, cov = (X'WX)^-1.
pub fn wls_closed_form(x: &DMatrix<f64>, y: &[f64], weights: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let w = DMatrix::from_diagonal(&DVector::from_column_slice(weights));
    let xtw = x.transpose() * w;
    let xtwx = &xtw * x;
    let xtwy = &xtw * DVector::from_column_slice(y);
    let inv = xtwx.try_inverse().expect("WLS normal equations singular");
    (&inv * xtwy, inv)
}

/// Deterministic test RNG.
pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand_chacha::rand_core::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
