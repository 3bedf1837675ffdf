//! Dynamic time warping with a Sakoe-Chiba band.
//!
//! Symmetric step pattern: diagonal, insertion, and deletion all carry unit
//! weight; the local distance is the absolute difference. A band half-width
//! of zero admits only the diagonal path, reducing the distance to the
//! series' Manhattan distance.

use super::MatchError;

/// Minimum cumulative |a_i - b_j| over monotone alignment paths with
/// |i - j| <= warping_limit.
pub fn dtw_distance(a: &[f64], b: &[f64], warping_limit: usize) -> Result<f64, MatchError> {
    if a.len() != b.len() {
        return Err(MatchError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len();
    if n == 0 {
        return Err(MatchError::EmptySeries);
    }
    let w = warping_limit;

    // cost[i][j] = best cumulative cost aligning a[..=i] with b[..=j],
    // rolled over two rows. Cells outside the band stay infinite.
    let mut prev = vec![f64::INFINITY; n];
    let mut curr = vec![f64::INFINITY; n];
    for i in 0..n {
        let lo = i.saturating_sub(w);
        let hi = (i + w).min(n - 1);
        for j in lo..=hi {
            let local = (a[i] - b[j]).abs();
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let up = if i > 0 { prev[j] } else { f64::INFINITY };
                let left = if j > 0 { curr[j - 1] } else { f64::INFINITY };
                let diag = if i > 0 && j > 0 { prev[j - 1] } else { f64::INFINITY };
                up.min(left).min(diag)
            };
            curr[j] = local + best;
        }
        std::mem::swap(&mut prev, &mut curr);
        curr.fill(f64::INFINITY);
    }
    Ok(prev[n - 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_series_have_zero_distance() {
        let a = [3.0, 1.0, 4.0, 1.0, 5.0];
        assert_eq!(dtw_distance(&a, &a, 1).unwrap(), 0.0);
    }

    #[test]
    fn zero_band_is_manhattan_distance() {
        let a = [1.0, 2.0, 3.0];
        let b = [2.0, 0.0, 5.0];
        let manhattan: f64 = a.iter().zip(&b).map(|(x, y): (&f64, &f64)| (x - y).abs()).sum();
        assert_eq!(dtw_distance(&a, &b, 0).unwrap(), manhattan);
    }

    #[test]
    fn shifted_spike_recovered_within_band() {
        // one-step phase shift: band 1 lets the spike align
        let a = [0.0, 0.0, 1.0, 0.0];
        let b = [0.0, 1.0, 0.0, 0.0];
        let d0 = dtw_distance(&a, &b, 0).unwrap();
        let d1 = dtw_distance(&a, &b, 1).unwrap();
        assert!(d1 < d0);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(matches!(
            dtw_distance(&[1.0], &[1.0, 2.0], 1),
            Err(MatchError::LengthMismatch { .. })
        ));
    }
}
