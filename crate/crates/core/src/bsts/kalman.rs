//! Kalman filtering, exact log-likelihood, and forward-filter
//! backward-sampling for the local linear trend model
//!
//!   y_t     = mu_t + eps_t,            eps ~ N(0, obs_var)
//!   mu_t+1  = mu_t + delta_t + eta_mu, eta_mu ~ N(0, level_var)
//!   delta_t+1 = delta_t + eta_delta,   eta_delta ~ N(0, slope_var)
//!
//! The state is (mu, delta); everything here is 2x2 and allocation-free in
//! the hot loop.

use super::BstsError;
use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const LN_2PI: f64 = 1.8378770664093453;

/// Fixed parameters of the local linear trend model, including the initial
/// state distribution. `diffuse` puts a wide proper prior on both state
/// elements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTrendParams {
    pub obs_var: f64,
    pub level_var: f64,
    pub slope_var: f64,
    pub init_mean: [f64; 2],
    /// Diagonal of the initial state covariance.
    pub init_var: [f64; 2],
}

impl LocalTrendParams {
    pub fn diffuse(obs_var: f64, level_var: f64, slope_var: f64, init_variance: f64) -> Self {
        LocalTrendParams {
            obs_var,
            level_var,
            slope_var,
            init_mean: [0.0, 0.0],
            init_var: [init_variance, init_variance],
        }
    }

    fn validate(&self) -> Result<(), BstsError> {
        let all = [
            self.obs_var,
            self.level_var,
            self.slope_var,
            self.init_mean[0],
            self.init_mean[1],
            self.init_var[0],
            self.init_var[1],
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(BstsError::NonFinite);
        }
        if self.obs_var < 0.0 || self.level_var < 0.0 || self.slope_var < 0.0 {
            return Err(BstsError::Config("negative variance".into()));
        }
        Ok(())
    }
}

pub(crate) struct FilterOutput {
    /// Filtered state means m_t = E[state_t | y_1..t].
    pub means: Vec<Vector2<f64>>,
    /// Filtered state covariances.
    pub covs: Vec<Matrix2<f64>>,
    pub loglik: f64,
}

fn transition() -> Matrix2<f64> {
    Matrix2::new(1.0, 1.0, 0.0, 1.0)
}

fn state_noise(params: &LocalTrendParams) -> Matrix2<f64> {
    Matrix2::new(params.level_var, 0.0, 0.0, params.slope_var)
}

pub(crate) fn filter(params: &LocalTrendParams, y: &[f64]) -> Result<FilterOutput, BstsError> {
    params.validate()?;
    if y.is_empty() {
        return Err(BstsError::EmptySeries);
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(BstsError::NonFinite);
    }
    let phi = transition();
    let q = state_noise(params);

    // predictive state at t = 1
    let mut a = Vector2::new(params.init_mean[0], params.init_mean[1]);
    let mut p = Matrix2::new(params.init_var[0], 0.0, 0.0, params.init_var[1]);

    let mut means = Vec::with_capacity(y.len());
    let mut covs = Vec::with_capacity(y.len());
    let mut loglik = 0.0;

    for (t, &yt) in y.iter().enumerate() {
        let f = p[(0, 0)] + params.obs_var;
        if !(f > 0.0) || !f.is_finite() {
            return Err(BstsError::FilterCollapse { t });
        }
        let v = yt - a[0];
        loglik -= 0.5 * (LN_2PI + f.ln() + v * v / f);

        let k = Vector2::new(p[(0, 0)], p[(1, 0)]) / f;
        let m = a + k * v;
        // P - k (first row of P); symmetrize against drift
        let mut pf = p - k * p.row(0);
        pf = (pf + pf.transpose()) * 0.5;
        means.push(m);
        covs.push(pf);

        a = phi * m;
        p = phi * pf * phi.transpose() + q;
    }
    Ok(FilterOutput { means, covs, loglik })
}

/// Exact Gaussian log-likelihood of the series under the model, by
/// prediction-error decomposition.
pub fn kalman_loglik(params: &LocalTrendParams, series: &[f64]) -> Result<f64, BstsError> {
    filter(params, series).map(|f| f.loglik)
}

/// Bivariate normal draw via the Cholesky factor, tolerating covariances on
/// the PSD boundary: the cross term is clamped to |rho| <= 1 so rounding
/// noise in a near-degenerate direction cannot leak into the other one.
fn sample_mvn2<R: Rng>(rng: &mut R, mean: Vector2<f64>, cov: Matrix2<f64>) -> Vector2<f64> {
    let a = cov[(0, 0)].max(0.0);
    let c = cov[(1, 1)].max(0.0);
    let bound = (a * c).sqrt();
    let b = (0.5 * (cov[(0, 1)] + cov[(1, 0)])).clamp(-bound, bound);
    let l11 = a.sqrt();
    let (l21, l22) = if l11 > 0.0 {
        let l21 = b / l11;
        (l21, (c - l21 * l21).max(0.0).sqrt())
    } else {
        (0.0, c.sqrt())
    };
    let z1: f64 = StandardNormal.sample(rng);
    let z2: f64 = StandardNormal.sample(rng);
    Vector2::new(mean[0] + l11 * z1, mean[1] + l21 * z1 + l22 * z2)
}

fn inv2(m: Matrix2<f64>) -> Option<Matrix2<f64>> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    if det.abs() < 1e-300 || !det.is_finite() {
        return None;
    }
    Some(Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det)
}

/// Forward-filter backward-sample: one joint draw of the state trajectory
/// from p(state_1..T | y, params).
///
/// The backward conditional is computed in information form,
/// precision = P_t^-1 + Phi' Q^-1 Phi, which adds positive matrices instead
/// of subtracting near-equal ones. The covariance form loses all precision
/// when the diffuse initial variance (1e6) meets per-step noise variances
/// around 1e-6 and leaks observation-scale noise into the slope.
pub(crate) fn ffbs<R: Rng>(
    params: &LocalTrendParams,
    y: &[f64],
    rng: &mut R,
) -> Result<Vec<Vector2<f64>>, BstsError> {
    let fo = filter(params, y)?;
    let n = y.len();
    let phi = transition();
    let q = state_noise(params);
    let q_inv = if params.level_var > 0.0 && params.slope_var > 0.0 {
        Some(Matrix2::new(1.0 / params.level_var, 0.0, 0.0, 1.0 / params.slope_var))
    } else {
        None
    };

    let mut states = vec![Vector2::zeros(); n];
    states[n - 1] = sample_mvn2(rng, fo.means[n - 1], fo.covs[n - 1]);
    for t in (0..n - 1).rev() {
        let (mean, cov) = match (q_inv, inv2(fo.covs[t])) {
            (Some(qi), Some(p_inv)) => {
                let prec = p_inv + phi.transpose() * qi * phi;
                let sigma = inv2(prec).ok_or(BstsError::FilterCollapse { t })?;
                let rhs = p_inv * fo.means[t] + phi.transpose() * (qi * states[t + 1]);
                (sigma * rhs, sigma)
            }
            _ => {
                // degenerate noise or filtered covariance: fall back to the
                // covariance-form conditional
                let p_pred = phi * fo.covs[t] * phi.transpose() + q;
                match inv2(p_pred) {
                    Some(pp_inv) => {
                        let j = fo.covs[t] * phi.transpose() * pp_inv;
                        (
                            fo.means[t] + j * (states[t + 1] - phi * fo.means[t]),
                            fo.covs[t] - j * p_pred * j.transpose(),
                        )
                    }
                    None => (fo.means[t], fo.covs[t]),
                }
            }
        };
        states[t] = sample_mvn2(rng, mean, cov);
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_state_noise_reduces_to_iid_gaussian_around_line() {
        // mu_1 = 2, delta = 0.5, no state noise: y_t ~ N(2 + 0.5 (t-1), obs_var)
        let params = LocalTrendParams {
            obs_var: 0.25,
            level_var: 0.0,
            slope_var: 0.0,
            init_mean: [2.0, 0.5],
            init_var: [0.0, 0.0],
        };
        let y = [2.1, 2.4, 3.2, 3.4];
        let got = kalman_loglik(&params, &y).unwrap();
        let mut want = 0.0;
        for (t, &v) in y.iter().enumerate() {
            let mean = 2.0 + 0.5 * t as f64;
            let e = v - mean;
            want -= 0.5 * (LN_2PI + 0.25f64.ln() + e * e / 0.25);
        }
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn doubling_obs_var_changes_loglik_by_analytic_amount() {
        // With zero state noise the model is iid around a line, so doubling
        // obs_var changes each term by -0.5 ln 2 + e^2/(4 var) - e^2/(2 var).
        let base = LocalTrendParams {
            obs_var: 0.5,
            level_var: 0.0,
            slope_var: 0.0,
            init_mean: [1.0, 0.0],
            init_var: [0.0, 0.0],
        };
        let doubled = LocalTrendParams { obs_var: 1.0, ..base };
        let y = [1.3, 0.6, 1.9, 0.8, 1.1];
        let ll1 = kalman_loglik(&base, &y).unwrap();
        let ll2 = kalman_loglik(&doubled, &y).unwrap();
        let sse: f64 = y.iter().map(|v| (v - 1.0) * (v - 1.0)).sum();
        let want = -0.5 * y.len() as f64 * 2.0f64.ln() + sse / (2.0 * 0.5) - sse / (2.0 * 1.0);
        assert!((ll2 - ll1 - want).abs() < 1e-12);
    }

    #[test]
    fn non_finite_input_rejected() {
        let params = LocalTrendParams::diffuse(1.0, 0.1, 0.01, 1e6);
        assert!(matches!(
            kalman_loglik(&params, &[1.0, f64::NAN]),
            Err(BstsError::NonFinite)
        ));
    }
}
