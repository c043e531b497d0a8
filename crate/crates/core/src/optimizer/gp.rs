//! Gaussian-process regression with a Matérn-5/2 kernel and per-dimension
//! length-scales chosen by grid search on the log marginal likelihood.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::function::erf::erfc;

const SQRT5: f64 = 2.236_067_977_499_79;

/// Matérn-5/2 correlation at scaled distance `r`.
#[inline]
pub fn matern52(r: f64) -> f64 {
    let s = SQRT5 * r;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyper {
    pub length_scales: Vec<f64>,
    /// Noise variance relative to the unit signal variance.
    pub nugget: f64,
}

fn scaled_distance(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(ls)
        .map(|((x, y), l)| {
            let d = (x - y) / l;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Fitted posterior on standardized targets.
#[derive(Debug, Clone)]
pub struct GaussianProcess {
    xs: Vec<Vec<f64>>,
    hyper: Hyper,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    y_mean: f64,
    y_std: f64,
    log_likelihood: f64,
}

impl GaussianProcess {
    fn fit_with(xs: &[Vec<f64>], z: &DVector<f64>, hyper: &Hyper) -> Option<(Cholesky<f64, Dyn>, DVector<f64>, f64)> {
        let n = xs.len();
        let k = DMatrix::from_fn(n, n, |i, j| {
            let v = matern52(scaled_distance(&xs[i], &xs[j], &hyper.length_scales));
            if i == j {
                v + hyper.nugget
            } else {
                v
            }
        });
        let chol = k.cholesky()?;
        let alpha = chol.solve(z);
        let log_det: f64 = chol.l_dirty().diagonal().iter().take(n).map(|d| d.ln()).sum();
        let ll = -0.5 * z.dot(&alpha) - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        ll.is_finite().then_some((chol, alpha, ll))
    }

    /// Fits the surrogate: an isotropic grid over length-scale and nugget, then
    /// one coordinate sweep refining each dimension's length-scale.
    pub fn fit(xs: &[Vec<f64>], ys: &[f64]) -> Option<Self> {
        let n = xs.len();
        if n == 0 || n != ys.len() {
            return None;
        }
        let dim = xs[0].len();
        let y_mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_std = if var > 1e-24 { var.sqrt() } else { 1.0 };
        let z = DVector::from_iterator(n, ys.iter().map(|y| (y - y_mean) / y_std));

        let mut best: Option<(Hyper, f64)> = None;
        let consider = |hyper: Hyper, best: &mut Option<(Hyper, f64)>| {
            if let Some((_, _, ll)) = Self::fit_with(xs, &z, &hyper) {
                if best.as_ref().is_none_or(|(_, b)| ll > *b) {
                    *best = Some((hyper, ll));
                }
            }
        };
        for &nugget in &[1e-6, 1e-3, 1e-2] {
            for i in 0..8 {
                // 0.05 .. 2.0, log-spaced
                let ls = 0.05 * (40f64).powf(i as f64 / 7.0);
                consider(
                    Hyper {
                        length_scales: vec![ls; dim],
                        nugget,
                    },
                    &mut best,
                );
            }
        }
        let (mut hyper, _) = best.clone()?;
        if dim > 1 {
            for d in 0..dim {
                let base = hyper.length_scales[d];
                for factor in [0.25, 0.5, 2.0, 4.0, 8.0] {
                    let mut h = hyper.clone();
                    h.length_scales[d] = (base * factor).clamp(0.01, 20.0);
                    consider(h, &mut best);
                }
                hyper = best.as_ref()?.0.clone();
            }
        }
        let (chol, alpha, log_likelihood) = Self::fit_with(xs, &z, &hyper)?;
        Some(Self {
            xs: xs.to_vec(),
            hyper,
            chol,
            alpha,
            y_mean,
            y_std,
            log_likelihood,
        })
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    /// Posterior mean and standard deviation in the original units.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(
            self.xs.len(),
            self.xs
                .iter()
                .map(|xi| matern52(scaled_distance(xi, x, &self.hyper.length_scales))),
        );
        let mean = ks.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&ks).unwrap_or_else(|| ks.clone());
        let var = (1.0 - v.dot(&v)).max(1e-12);
        (self.y_mean + self.y_std * mean, self.y_std * var.sqrt())
    }
}

#[inline]
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Expected improvement over `best` for a maximization problem.
pub fn expected_improvement(mean: f64, std: f64, best: f64, xi: f64) -> f64 {
    if std <= 0.0 {
        return (mean - best - xi).max(0.0);
    }
    let gap = mean - best - xi;
    let z = gap / std;
    gap * normal_cdf(z) + std * normal_pdf(z)
}
