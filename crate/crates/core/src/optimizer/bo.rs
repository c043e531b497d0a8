//! Expected-improvement Bayesian optimization over the unit hypercube.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gp::{expected_improvement, GaussianProcess};

/// Number of feasible points scored by the acquisition step.
pub const ACQUISITION_SAMPLES: usize = 1024;

/// Latin-hypercube design of `n` points in `[0, 1]^dim`.
pub fn latin_hypercube(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; dim]; n];
    for d in 0..dim {
        let mut strata: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            strata.swap(i, rng.random_range(0..=i));
        }
        for (p, s) in points.iter_mut().zip(strata) {
            p[d] = (s as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    points
}

/// Which step produced a proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Initial,
    Acquisition,
    /// Surrogate fit failed; uniform sample.
    Fallback,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Initial => "initial",
            Phase::Acquisition => "ei",
            Phase::Fallback => "fallback",
        }
    }
}

/// Sequential optimizer state. `repair` maps any point of the cube onto the
/// feasible set and is applied to every proposal.
pub struct BayesOpt<R: Fn(&mut [f64])> {
    dim: usize,
    rng: ChaCha8Rng,
    design: Vec<Vec<f64>>,
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
    repair: R,
    xi: f64,
}

impl<R: Fn(&mut [f64])> BayesOpt<R> {
    /// `initial` space-filling points (at least 5) precede surrogate proposals.
    pub fn new(dim: usize, initial: usize, seed: u64, repair: R) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut design = latin_hypercube(initial.max(5), dim, &mut rng);
        for p in &mut design {
            repair(p);
        }
        Self {
            dim,
            rng,
            design,
            xs: Vec::new(),
            ys: Vec::new(),
            repair,
            xi: 0.01,
        }
    }

    pub fn observations(&self) -> usize {
        self.ys.len()
    }

    pub fn best(&self) -> Option<(&[f64], f64)> {
        self.ys
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, &y)| (self.xs[i].as_slice(), y))
    }

    pub fn observe(&mut self, x: Vec<f64>, y: f64) {
        self.xs.push(x);
        self.ys.push(y);
    }

    fn uniform(&mut self) -> Vec<f64> {
        let mut p: Vec<f64> = (0..self.dim).map(|_| self.rng.random()).collect();
        (self.repair)(&mut p);
        p
    }

    /// Candidate pool: half uniform, half Gaussian perturbations of the best observations.
    fn candidate_pool(&mut self) -> Vec<Vec<f64>> {
        let mut order: Vec<usize> = (0..self.ys.len()).collect();
        order.sort_by(|&a, &b| self.ys[b].total_cmp(&self.ys[a]).then(a.cmp(&b)));
        order.truncate(5);
        let mut pool = Vec::with_capacity(ACQUISITION_SAMPLES);
        for i in 0..ACQUISITION_SAMPLES {
            if i % 2 == 0 || order.is_empty() {
                pool.push(self.uniform());
            } else {
                let centre = &self.xs[order[(i / 2) % order.len()]];
                let sigma = [0.02, 0.05, 0.1, 0.2][(i / 2) % 4];
                let mut p: Vec<f64> = centre
                    .iter()
                    .map(|&c| (c + sigma * gaussian(&mut self.rng)).clamp(0.0, 1.0))
                    .collect();
                (self.repair)(&mut p);
                pool.push(p);
            }
        }
        pool
    }

    pub fn propose(&mut self) -> (Vec<f64>, Phase) {
        let n = self.ys.len();
        if n < self.design.len() {
            return (self.design[n].clone(), Phase::Initial);
        }
        let Some(gp) = GaussianProcess::fit(&self.xs, &self.ys) else {
            log::warn!("surrogate fit failed after {n} observations; sampling uniformly");
            return (self.uniform(), Phase::Fallback);
        };
        let best = self.ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let y_scale = {
            let mean = self.ys.iter().sum::<f64>() / n as f64;
            (self.ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64)
                .sqrt()
                .max(1e-12)
        };
        let mut pool = self.candidate_pool();
        let mut winner = 0;
        let mut winner_ei = f64::NEG_INFINITY;
        for (i, p) in pool.iter().enumerate() {
            let (mean, std) = gp.predict(p);
            let ei = expected_improvement(mean, std, best, self.xi * y_scale);
            if ei > winner_ei {
                winner_ei = ei;
                winner = i;
            }
        }
        (pool.swap_remove(winner), Phase::Acquisition)
    }
}

/// Standard normal sample (Box-Muller).
fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Maximizes `f` over `[0, 1]^dim` for `iterations` evaluations; returns the best point and value.
pub fn maximize(
    dim: usize,
    iterations: usize,
    seed: u64,
    repair: impl Fn(&mut [f64]),
    mut f: impl FnMut(&[f64]) -> f64,
) -> (Vec<f64>, f64) {
    let initial = (iterations / 10).max(5);
    let mut bo = BayesOpt::new(dim, initial, seed, repair);
    for _ in 0..iterations {
        let (x, _) = bo.propose();
        let y = f(&x);
        bo.observe(x, y);
    }
    let (x, y) = bo.best().expect("at least one iteration");
    (x.to_vec(), y)
}
