//! Small Monte Carlo summaries.

use serde::{Deserialize, Serialize};

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Estimate {
        let n = xs.len();
        if n == 0 {
            return Estimate {
                mean: f64::NAN,
                stderr: f64::NAN,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let stderr = if n < 2 {
            f64::NAN
        } else {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        Estimate { mean, stderr, n }
    }

    pub fn exact(value: f64) -> Estimate {
        Estimate {
            mean: value,
            stderr: 0.0,
            n: 0,
        }
    }

    /// Stderr is meaningful only with at least two samples.
    pub fn reliable(&self) -> bool {
        self.n >= 2 && self.stderr.is_finite()
    }

    /// `(mean - target) / stderr`; zero when both the gap and the stderr vanish.
    pub fn z_score(&self, target: f64) -> f64 {
        z_score(self.mean - target, self.stderr)
    }
}

pub fn z_score(gap: f64, stderr: f64) -> f64 {
    if stderr > 0.0 {
        gap / stderr
    } else if gap.abs() <= 1e-300 {
        0.0
    } else {
        f64::INFINITY.copysign(gap)
    }
}

/// Linear-interpolated quantile of unsorted data.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    v[lo] * (1.0 - w) + v[hi] * w
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// Ratio of means `Σa / Σb` with a delta-method stderr from paired samples.
pub fn ratio_of_means(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let r = ma / mb;
    if a.len() < 2 {
        return (r, f64::NAN);
    }
    let var = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - r * y).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    (r, (var / n).sqrt() / mb.abs())
}
