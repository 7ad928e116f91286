//! Descriptive statistics of return series.

use serde::{Deserialize, Serialize};

/// Population moments of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub std_dev: f64,
    pub skew: f64,
    pub excess_kurtosis: f64,
}

impl Moments {
    /// All-zero moments for empty or constant samples.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: 0.0, std_dev: 0.0, skew: 0.0, excess_kurtosis: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n;
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for v in values {
            let d = v - mean;
            let d2 = d * d;
            m2 += d2;
            m3 += d2 * d;
            m4 += d2 * d2;
        }
        let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
        if m2 <= 0.0 {
            return Self { mean, std_dev: 0.0, skew: 0.0, excess_kurtosis: 0.0 };
        }
        Self {
            mean,
            std_dev: m2.sqrt(),
            skew: m3 / m2.powf(1.5),
            excess_kurtosis: m4 / (m2 * m2) - 3.0,
        }
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Uniform-bin histogram over `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub const DEFAULT_BINS: usize = 201;

    /// Histogram over the observed range of `values`.
    pub fn from_samples(values: &[f64], bins: usize) -> Self {
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let (lo, hi) = if values.is_empty() { (0.0, 0.0) } else { (lo, hi) };
        let mut h = Self { lo, hi, counts: vec![0; bins] };
        for &v in values {
            h.add(v, 1);
        }
        h
    }

    fn bin_of(&self, v: f64) -> usize {
        let bins = self.counts.len();
        if self.hi <= self.lo {
            return bins / 2;
        }
        let x = (v - self.lo) / (self.hi - self.lo) * bins as f64;
        (x.max(0.0) as usize).min(bins - 1)
    }

    fn add(&mut self, v: f64, count: u64) {
        let b = self.bin_of(v);
        self.counts[b] += count;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.bin_width()
    }

    /// Fraction of samples per bin; sums to one for a non-empty histogram.
    pub fn mass(&self) -> Vec<f64> {
        let total = self.total() as f64;
        self.counts
            .iter()
            .map(|&c| if total > 0.0 { c as f64 / total } else { 0.0 })
            .collect()
    }

    /// Re-bin several histograms onto a common grid spanning all of them,
    /// assigning each source bin's count to the bin containing its center.
    pub fn merge(parts: &[Histogram], bins: usize) -> Self {
        let lo = parts.iter().map(|h| h.lo).fold(f64::INFINITY, f64::min);
        let hi = parts.iter().map(|h| h.hi).fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if parts.is_empty() { (0.0, 0.0) } else { (lo, hi) };
        let mut out = Self { lo, hi, counts: vec![0; bins] };
        for h in parts {
            for (i, &c) in h.counts.iter().enumerate() {
                if c > 0 {
                    out.add(h.bin_center(i), c);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn moments_of_known_sample() {
        let m = Moments::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(m.mean, 2.5);
        assert_relative_eq!(m.std_dev, 1.25f64.sqrt());
        assert_relative_eq!(m.skew, 0.0, epsilon = 1e-15);
        // m4 = 2.5625, m2^2 = 1.5625
        assert_relative_eq!(m.excess_kurtosis, 2.5625 / 1.5625 - 3.0, epsilon = 1e-14);
        let c = Moments::of(&[2.0; 5]);
        assert_eq!(c.std_dev, 0.0);
        assert_eq!(Moments::of(&[]).mean, 0.0);
    }

    #[test]
    fn skewed_sample_sign() {
        let mut v = vec![0.0; 100];
        v.push(-10.0);
        assert!(Moments::of(&v).skew < 0.0);
    }

    #[test]
    fn histogram_mass_sums_to_one() {
        let v: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.01 - 0.5).collect();
        let h = Histogram::from_samples(&v, Histogram::DEFAULT_BINS);
        assert_eq!(h.total(), 1000);
        assert_relative_eq!(h.mass().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let merged = Histogram::merge(&[h.clone(), h], 51);
        assert_eq!(merged.total(), 2000);
    }

    #[test]
    fn sample_std_basic() {
        assert_eq!(sample_std(&[1.0]), 0.0);
        assert_relative_eq!(sample_std(&[1.0, 3.0]), 2f64.sqrt());
    }
}
