//! Rank-frequency series and log-log power-law fits, `f(r) ~ r^a`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{PulseError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedWord {
    pub rank: usize,
    pub frequency: u64,
    pub word: String,
}

/// Words ordered by descending frequency; ranks are `1..=N`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZipfSeries {
    pub points: Vec<RankedWord>,
}

impl ZipfSeries {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn pairs(&self) -> Vec<(usize, u64)> {
        self.points.iter().map(|p| (p.rank, p.frequency)).collect()
    }

    /// `rank,frequency` CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,frequency\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{}", p.rank, p.frequency);
        }
        s
    }
}

/// Ties are broken lexicographically by word.
pub fn zipf_rank_frequency(freqs: &BTreeMap<String, u64>) -> ZipfSeries {
    let mut entries: Vec<(&String, u64)> = freqs.iter().map(|(w, &c)| (w, c)).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ZipfSeries {
        points: entries
            .into_iter()
            .enumerate()
            .map(|(i, (w, c))| RankedWord {
                rank: i + 1,
                frequency: c,
                word: w.clone(),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit<T> {
    /// Slope of ln f against ln r.
    pub exponent: T,
    pub intercept: T,
    pub r_squared: T,
}

/// Ordinary least squares of `ln f` on `ln r`.
pub fn fit_log_log<T: Scalar>(points: &[(T, T)]) -> Result<PowerLawFit<T>> {
    let logs: Vec<(T, T)> = points
        .iter()
        .filter(|(r, f)| *r > T::zero() && *f > T::zero())
        .map(|&(r, f)| (r.ln(), f.ln()))
        .collect();
    if logs.len() < 3 {
        return Err(PulseError::InsufficientData(format!(
            "power-law fit needs at least 3 positive points, got {}",
            logs.len()
        )));
    }
    let n = T::of(logs.len() as f64);
    let mean_x = logs.iter().map(|p| p.0).sum::<T>() / n;
    let mean_y = logs.iter().map(|p| p.1).sum::<T>() / n;
    let mut sxx = T::zero();
    let mut sxy = T::zero();
    let mut syy = T::zero();
    for &(x, y) in &logs {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx <= T::zero() {
        return Err(PulseError::InsufficientData("all ranks identical".into()));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    // A perfectly flat series is fitted exactly.
    let r_squared = if syy <= T::zero() {
        T::one()
    } else {
        (sxy * sxy / (sxx * syy)).min(T::one())
    };
    Ok(PowerLawFit {
        exponent: slope,
        intercept,
        r_squared,
    })
}

pub fn fit_power_law<T: Scalar>(series: &ZipfSeries) -> Result<PowerLawFit<T>> {
    let pts: Vec<(T, T)> = series
        .points
        .iter()
        .map(|p| (T::of(p.rank as f64), T::of(p.frequency as f64)))
        .collect();
    fit_log_log(&pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    // Box-Muller
    fn normal<R: Rng>(rng: &mut R) -> f64 {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn map(items: &[(&str, u64)]) -> BTreeMap<String, u64> {
        items.iter().map(|(w, c)| (w.to_string(), *c)).collect()
    }

    #[test]
    fn ranks_with_lexicographic_ties() {
        let s = zipf_rank_frequency(&map(&[("c", 3), ("a", 5), ("b", 3)]));
        assert_eq!(s.pairs(), [(1, 5), (2, 3), (3, 3)]);
        assert_eq!(s.points[1].word, "b");
        assert_eq!(s.points[2].word, "c");
        assert!(zipf_rank_frequency(&BTreeMap::new()).is_empty());
        assert_eq!(s.to_csv(), "rank,frequency\n1,5\n2,3\n3,3\n");
    }

    #[test]
    fn exact_power_laws_are_recovered() {
        for a in [-1.0, -0.1, -2.5] {
            let pts: Vec<(f64, f64)> = (1..=100).map(|r| (r as f64, 1000.0 * (r as f64).powf(a))).collect();
            let fit = fit_log_log(&pts).unwrap();
            assert!((fit.exponent - a).abs() <= 1e-9 * a.abs(), "{a}: {}", fit.exponent);
            assert!((fit.intercept - 1000f64.ln()).abs() < 1e-9);
            assert!(fit.r_squared > 1.0 - 1e-12);
        }
    }

    #[test]
    fn noisy_power_law_within_tolerance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for a in [-1.0, -0.1] {
            let freqs: BTreeMap<String, u64> = (1..=100)
                .map(|r| {
                    let f = 1e6 * (r as f64).powf(a) * (0.1 * normal(&mut rng)).exp();
                    (format!("w{r:03}"), f.round() as u64)
                })
                .collect();
            let fit: PowerLawFit<f64> = fit_power_law(&zipf_rank_frequency(&freqs)).unwrap();
            assert!((fit.exponent - a).abs() < 0.05, "{a}: {}", fit.exponent);
        }
    }

    #[test]
    fn too_few_points() {
        let s = zipf_rank_frequency(&map(&[("a", 2), ("b", 1)]));
        assert!(matches!(fit_power_law::<f64>(&s), Err(PulseError::InsufficientData(_))));
    }

    #[test]
    fn f32_fit_agrees() {
        let pts: Vec<(f32, f32)> = (1..=50).map(|r| (r as f32, 500.0 * (r as f32).powf(-1.2))).collect();
        let fit = fit_log_log(&pts).unwrap();
        assert!((fit.exponent + 1.2).abs() < 1e-4);
    }

    proptest::proptest! {
        #[test]
        fn series_is_monotone(counts in proptest::collection::btree_map("[a-z]{1,4}", 1u64..1000, 0..60)) {
            let s = zipf_rank_frequency(&counts);
            for (i, p) in s.points.iter().enumerate() {
                proptest::prop_assert_eq!(p.rank, i + 1);
            }
            for w in s.points.windows(2) {
                proptest::prop_assert!(w[0].frequency >= w[1].frequency);
            }
        }
    }
}
