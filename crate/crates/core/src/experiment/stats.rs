//! Small summary statistics over per-seed results.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for fewer than two values.
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(xs: &[f64]) -> Stat {
    let n = xs.len();
    if n == 0 {
        return Stat::default();
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Stat { mean, std, n }
}

/// One-sided paired t-test of `H1: E[b − a] > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub lower: String,
    pub higher: String,
    pub mean_diff: f64,
    pub t: f64,
    pub df: usize,
    pub p_value: f64,
}

pub fn paired_t_greater(lower: &str, a: &[f64], higher: &str, b: &[f64]) -> PairedTest {
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let s = mean_std(&diffs);
    let df = diffs.len().saturating_sub(1);
    let (t, p_value) = if df == 0 || s.std == 0.0 {
        // Degenerate: every difference is identical.
        let p = if s.mean > 0.0 {
            0.0
        } else if s.mean < 0.0 {
            1.0
        } else {
            0.5
        };
        (f64::NAN, p)
    } else {
        let t = s.mean / (s.std / (s.n as f64).sqrt());
        let dist = StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom");
        (t, 1.0 - dist.cdf(t))
    };
    PairedTest { lower: lower.into(), higher: higher.into(), mean_diff: s.mean, t, df, p_value }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_values() {
        let s = mean_std(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[]).n, 0);
    }

    #[test]
    fn paired_test_matches_table_value() {
        // diffs 1,2,3,4,5: mean 3, sd sqrt(2.5), t = 3 / (sqrt(2.5)/sqrt(5)) = 4.2426, df 4 → p ≈ 0.00661
        let a = [0.0; 5];
        let b = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = paired_t_greater("a", &a, "b", &b);
        assert!((r.t - 4.242640687).abs() < 1e-6);
        assert!((r.p_value - 0.006605).abs() < 1e-4, "{}", r.p_value);
        assert!(paired_t_greater("b", &b, "a", &a).p_value > 0.99);
        assert_eq!(paired_t_greater("a", &[1.0, 2.0], "b", &[2.0, 3.0]).p_value, 0.0);
    }
}
