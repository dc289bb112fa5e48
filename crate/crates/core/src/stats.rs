//! Robust statistics and local-regression kernels used by the adaptive
//! overload detectors.

use crate::error::{Error, Result};

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn median_of_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median; even-length inputs average the two central order statistics.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("median of an empty list".into()));
    }
    Ok(median_of_sorted(&sorted(values)))
}

/// Median absolute deviation from the median (unscaled).
pub fn mad(values: &[f64]) -> Result<f64> {
    let m = median(values)?;
    let deviations: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    median(&deviations)
}

/// Interquartile range with Tukey hinges: the sorted list is split at the
/// median (the median element itself is dropped for odd lengths) and each
/// quartile is the median of its half.
pub fn iqr(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 4 {
        return Err(Error::Contract(format!("iqr needs >= 4 values, got {n}")));
    }
    let v = sorted(values);
    let q1 = median_of_sorted(&v[..n / 2]);
    let q3 = median_of_sorted(&v[n.div_ceil(2)..]);
    Ok(q3 - q1)
}

/// Tricube weights over positions `1..=n`, heaviest on the most recent point.
pub fn tricube_weights(n: usize) -> Vec<f64> {
    let nf = n as f64;
    (1..=n)
        .map(|i| {
            let d = (n - i) as f64 / nf;
            let t = 1.0 - d * d * d;
            t * t * t
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Line {
    intercept: f64,
    slope: f64,
}

impl Line {
    fn at(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

/// Weighted least-squares line through `(i, ys[i-1])`, `i = 1..=n`.
/// `None` when the weights do not pin down a slope.
fn weighted_line(ys: &[f64], weights: &[f64]) -> Option<Line> {
    let sw: f64 = weights.iter().sum();
    if !(sw > 0.0) {
        return None;
    }
    let xs = (1..=ys.len()).map(|i| i as f64);
    let (mut sx, mut sy) = (0.0, 0.0);
    for ((x, &y), &w) in xs.clone().zip(ys).zip(weights) {
        sx += w * x;
        sy += w * y;
    }
    let (xbar, ybar) = (sx / sw, sy / sw);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for ((x, &y), &w) in xs.zip(ys).zip(weights) {
        sxx += w * (x - xbar) * (x - xbar);
        sxy += w * (x - xbar) * (y - ybar);
    }
    // Sxx is a weighted spread of integer abscissae; anything this small
    // means the weight sits on a single point.
    if !(sxx > 1e-12 * sw) {
        return None;
    }
    let slope = sxy / sxx;
    Some(Line {
        intercept: ybar - slope * xbar,
        slope,
    })
}

fn check_history(history: &[f64]) -> Result<()> {
    if history.len() < 2 {
        return Err(Error::Contract(format!(
            "local regression needs >= 2 points, got {}",
            history.len()
        )));
    }
    Ok(())
}

/// One-step-ahead prediction from a tricube-weighted linear fit, floored at 0.
pub fn loess_predict(history: &[f64]) -> Result<f64> {
    check_history(history)?;
    let weights = tricube_weights(history.len());
    let line = weighted_line(history, &weights)
        .ok_or_else(|| Error::Contract("degenerate local regression".into()))?;
    Ok(line.at((history.len() + 1) as f64).max(0.0))
}

pub const ROBUST_ITERATIONS: usize = 2;

/// [`loess_predict`] with bisquare robustness reweighting
/// (`ROBUST_ITERATIONS` rounds, residual scale `6 * median|r|`).
pub fn robust_loess_predict(history: &[f64]) -> Result<f64> {
    check_history(history)?;
    let n = history.len();
    let weights = tricube_weights(n);
    let initial = weighted_line(history, &weights)
        .ok_or_else(|| Error::Contract("degenerate local regression".into()))?;
    let scale_floor = 1e-12 * (1.0 + history.iter().fold(0.0f64, |m, y| m.max(y.abs())));

    let mut line = initial;
    for _ in 0..ROBUST_ITERATIONS {
        let residuals: Vec<f64> = history
            .iter()
            .enumerate()
            .map(|(i, y)| y - line.at((i + 1) as f64))
            .collect();
        let abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
        let m = median(&abs)?;
        if m <= scale_floor {
            break;
        }
        let cutoff = 6.0 * m;
        let combined: Vec<f64> = residuals
            .iter()
            .zip(&weights)
            .map(|(r, w)| {
                if r.abs() < cutoff {
                    let u = r / cutoff;
                    let b = 1.0 - u * u;
                    w * b * b
                } else {
                    0.0
                }
            })
            .collect();
        match weighted_line(history, &combined) {
            Some(l) => line = l,
            None => {
                line = initial;
                break;
            }
        }
    }
    Ok(line.at((n + 1) as f64).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EPS: f64 = 1e-12;

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
        assert!(median(&[]).is_err());
    }

    #[test]
    fn mad_examples() {
        assert_eq!(mad(&[0.5; 12]).unwrap(), 0.0);
        assert!((mad(&[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap() - 0.1).abs() < EPS);
        assert!((mad(&[0.1, 0.9]).unwrap() - 0.4).abs() < EPS);
    }

    #[test]
    fn iqr_examples() {
        let v: Vec<f64> = (1..=8).map(|i| i as f64 / 10.0).collect();
        assert!((iqr(&v).unwrap() - 0.4).abs() < EPS);
        assert_eq!(iqr(&[0.3; 4]).unwrap(), 0.0);
        assert_eq!(iqr(&[0.0, 0.0, 1.0, 1.0]).unwrap(), 1.0);
        assert!(iqr(&[0.1, 0.2, 0.3]).is_err());
    }

    #[test]
    fn iqr_odd_length_drops_median() {
        // sorted 1..=7: lower half [1,2,3] -> 2, upper half [5,6,7] -> 6
        let v = [7.0, 1.0, 5.0, 3.0, 2.0, 6.0, 4.0];
        assert_eq!(iqr(&v).unwrap(), 4.0);
    }

    #[test]
    fn tricube_orientation() {
        let w = tricube_weights(10);
        assert_eq!(w[9], 1.0);
        assert!(w.windows(2).all(|p| p[0] < p[1]));
        assert!(w[0] > 0.0);
    }

    #[test]
    fn loess_exact_line() {
        let h: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert!((loess_predict(&h).unwrap() - 1.1).abs() < 1e-9);
        assert!((robust_loess_predict(&h).unwrap() - 1.1).abs() < 1e-9);
    }

    #[test]
    fn loess_constant() {
        assert!((loess_predict(&[0.4; 10]).unwrap() - 0.4).abs() < 1e-12);
        assert!((robust_loess_predict(&[0.4; 10]).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn loess_spike_raises_prediction() {
        let mut h = vec![0.5; 10];
        h[9] = 0.9;
        assert!(loess_predict(&h).unwrap() > 0.5);
    }

    #[test]
    fn loess_floors_at_zero() {
        let h: Vec<f64> = (0..10).map(|i| 0.9 - 0.1 * i as f64).collect();
        assert_eq!(loess_predict(&h).unwrap(), 0.0);
    }

    #[test]
    fn loess_needs_two_points() {
        assert!(loess_predict(&[0.5]).is_err());
        assert!(robust_loess_predict(&[]).is_err());
    }

    #[test]
    fn robust_fit_resists_outlier() {
        let truth = |i: usize| 0.2 + 0.03 * i as f64;
        let mut h: Vec<f64> = (1..=10).map(truth).collect();
        h[4] = 0.95;
        let target = truth(11);
        let lr = (loess_predict(&h).unwrap() - target).abs();
        let lrr = (robust_loess_predict(&h).unwrap() - target).abs();
        assert!(lrr < lr, "lrr error {lrr} vs lr error {lr}");
    }

    proptest! {
        #[test]
        fn mad_and_iqr_translation_and_scale(
            v in prop::collection::vec(0.0f64..1.0, 4..30),
            c in -1.0f64..1.0,
            k in 0.0f64..5.0,
        ) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
            prop_assert!((mad(&shifted).unwrap() - mad(&v).unwrap()).abs() < 1e-12);
            prop_assert!((iqr(&shifted).unwrap() - iqr(&v).unwrap()).abs() < 1e-12);
            prop_assert!((mad(&scaled).unwrap() - k * mad(&v).unwrap()).abs() < 1e-12);
            prop_assert!((iqr(&scaled).unwrap() - k * iqr(&v).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn loess_reproduces_affine_history(a in -1.0f64..1.0, b in 0.0f64..0.2, n in 3usize..20) {
            let h: Vec<f64> = (1..=n).map(|i| a + b * i as f64).collect();
            let expected = (a + b * (n + 1) as f64).max(0.0);
            prop_assert!((loess_predict(&h).unwrap() - expected).abs() < 1e-9);
            prop_assert!((robust_loess_predict(&h).unwrap() - expected).abs() < 1e-9);
        }
    }
}
