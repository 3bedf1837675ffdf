//! Stochastic search variable selection over the static regression.
//!
//! Coefficients carry independent Bernoulli inclusion indicators and a
//! Zellner g-prior slab: prior precision is the half-diagonal-blended Gram
//! matrix divided by g, scaled by the observation variance, so the prior is
//! worth n/g observations centered at zero. With the observation variance
//! known from the rest of the Gibbs sweep, the indicator scan uses the exact
//! conjugate marginal likelihood of each subset.

use super::BstsError;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub(crate) struct SsvsWorkspace {
    x: DMatrix<f64>,
    xtx: DMatrix<f64>,
    /// Slab prior precision for the full coefficient vector.
    prior_info: DMatrix<f64>,
    /// ln(pi / (1 - pi)) per coefficient; None marks an always-in column.
    prior_log_odds: Vec<Option<f64>>,
}

impl SsvsWorkspace {
    /// `forced[j]` columns (the intercept) bypass selection. `inclusion_prob`
    /// applies to every non-forced column.
    pub fn new(x: DMatrix<f64>, slab_g: f64, inclusion_prob: f64, forced: &[bool]) -> Self {
        let k = x.ncols();
        let xtx = x.transpose() * &x;
        // half-and-half blend of the Gram matrix with its diagonal keeps
        // subset precision matrices well conditioned under collinear pools
        let mut prior_info = &xtx * 0.5;
        for j in 0..k {
            prior_info[(j, j)] += 0.5 * xtx[(j, j)];
            // guard all-zero columns
            if prior_info[(j, j)] <= 0.0 {
                prior_info[(j, j)] = 1e-8;
            }
        }
        prior_info /= slab_g;
        let pi = inclusion_prob.clamp(1e-9, 1.0 - 1e-9);
        let prior_log_odds = forced
            .iter()
            .map(|&f| if f { None } else { Some((pi / (1.0 - pi)).ln()) })
            .collect();
        SsvsWorkspace {
            x,
            xtx,
            prior_info,
            prior_log_odds,
        }
    }

    fn submatrix(src: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), idx.len(), |r, c| src[(idx[r], idx[c])])
    }

    /// ln p(z | gamma) up to terms constant in gamma, via the conjugate
    /// normal marginal with known observation variance.
    fn log_marginal(&self, idx: &[usize], xtz: &DVector<f64>, ztz: f64, sigma2: f64) -> Result<f64, BstsError> {
        if idx.is_empty() {
            return Ok(-ztz / (2.0 * sigma2));
        }
        let a = Self::submatrix(&self.prior_info, idx);
        let m = &a + Self::submatrix(&self.xtx, idx);
        let b = DVector::from_fn(idx.len(), |r, _| xtz[idx[r]]);
        let chol_a = nalgebra::Cholesky::new(a).ok_or(BstsError::SlabNotPd)?;
        let chol_m = nalgebra::Cholesky::new(m).ok_or(BstsError::SlabNotPd)?;
        let logdet = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
            2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
        };
        let fitted = b.dot(&chol_m.solve(&b));
        Ok(0.5 * logdet(&chol_a) - 0.5 * logdet(&chol_m) - (ztz - fitted) / (2.0 * sigma2))
    }

    /// One systematic Gibbs scan over the indicators followed by a draw of
    /// the included coefficients. Returns the full-length beta (zeros for
    /// excluded columns); `gamma` is updated in place.
    pub fn draw<R: Rng>(
        &self,
        z: &DVector<f64>,
        sigma2: f64,
        gamma: &mut [bool],
        rng: &mut R,
    ) -> Result<DVector<f64>, BstsError> {
        let k = self.x.ncols();
        debug_assert_eq!(gamma.len(), k);
        let xtz = self.x.transpose() * z;
        let ztz = z.dot(z);

        let active = |gamma: &[bool]| -> Vec<usize> {
            (0..k).filter(|&j| gamma[j]).collect()
        };

        let mut current = self.log_marginal(&active(gamma), &xtz, ztz, sigma2)?;
        for j in 0..k {
            let Some(log_odds) = self.prior_log_odds[j] else {
                continue;
            };
            gamma[j] = !gamma[j];
            let flipped = self.log_marginal(&active(gamma), &xtz, ztz, sigma2)?;
            // log posterior odds of the *flipped* state vs current
            let prior_term = if gamma[j] { log_odds } else { -log_odds };
            let logit = flipped - current + prior_term;
            let keep_flip = rng.random::<f64>() < 1.0 / (1.0 + (-logit).exp());
            if keep_flip {
                current = flipped;
            } else {
                gamma[j] = !gamma[j];
            }
        }

        // beta_S ~ N(M^-1 b, sigma2 M^-1)
        let idx = active(gamma);
        let mut beta = DVector::zeros(k);
        if !idx.is_empty() {
            let m = Self::submatrix(&self.prior_info, &idx) + Self::submatrix(&self.xtx, &idx);
            let b = DVector::from_fn(idx.len(), |r, _| xtz[idx[r]]);
            let chol = nalgebra::Cholesky::new(m).ok_or(BstsError::SlabNotPd)?;
            let mean = chol.solve(&b);
            let zdraw = DVector::from_fn(idx.len(), |_, _| StandardNormal.sample(rng));
            // solve L' s = z so s has covariance M^-1
            let spread = chol
                .l()
                .transpose()
                .solve_upper_triangular(&zdraw)
                .ok_or(BstsError::SlabNotPd)?;
            let draw = mean + spread * sigma2.sqrt();
            for (r, &col) in idx.iter().enumerate() {
                beta[col] = draw[r];
            }
        }
        Ok(beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn strong_single_signal_is_always_included() {
        let n = 60;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c: Vec<f64> = (0..n).map(|t| 1.0 + (t as f64 * 0.4).sin()).collect();
        let z: Vec<f64> = c.iter().map(|v| 2.0 * v).collect();
        let x = DMatrix::from_fn(n, 2, |r, j| if j == 0 { 1.0 } else { c[r] });
        let ws = SsvsWorkspace::new(x, 50.0, 0.5, &[true, false]);
        let zv = DVector::from_vec(z);
        let mut gamma = vec![true, false];
        let mut included = 0;
        for _ in 0..200 {
            let beta = ws.draw(&zv, 1e-4, &mut gamma, &mut rng).unwrap();
            if gamma[1] {
                included += 1;
                assert!((beta[1] - 2.0).abs() < 0.5, "slab draw far off: {}", beta[1]);
            }
        }
        assert!(included > 190, "signal included only {included}/200 times");
    }

    #[test]
    fn pure_noise_column_is_mostly_excluded() {
        let n = 60;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise: Vec<f64> = (0..n).map(|t| ((t * 7919 % 23) as f64 - 11.0) / 11.0).collect();
        let z = DVector::from_element(n, 0.0);
        let x = DMatrix::from_fn(n, 2, |r, j| if j == 0 { 1.0 } else { noise[r] });
        let ws = SsvsWorkspace::new(x, 50.0, 0.33, &[true, false]);
        let mut gamma = vec![true, false];
        let mut included = 0;
        for _ in 0..200 {
            ws.draw(&z, 1e-2, &mut gamma, &mut rng).unwrap();
            if gamma[1] {
                included += 1;
            }
        }
        assert!(included < 100, "noise included {included}/200 times");
    }
}
