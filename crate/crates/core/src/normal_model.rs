//! Exchangeable Normal-means model for many arms and many covariate cells.
//!
//! Cell means are `mu_j^k = alpha + beta_j + gamma^k + delta_j^k` with prior
//! variances `a, b, c, d`, and cell averages add noise of variance
//! `sigma2 / m`. In the many-cells limit `alpha` and `gamma` are known, and
//! the joint rule shrinks arm contrasts by `d / (d + sigma2/m)` while the
//! arm-by-arm rule shrinks everything by `(b + d) / (b + d + sigma2/m)`.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalModelParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub sigma2: f64,
    /// Units per cell.
    pub m: f64,
    /// Number of non-control arms; there are `k + 1` arms.
    pub k: usize,
}

impl Default for NormalModelParams {
    fn default() -> Self {
        Self { a: 1.0, b: 1.0, c: 1.0, d: 1.0, sigma2: 1.0, m: 1.0, k: 9 }
    }
}

impl NormalModelParams {
    /// `a, d, sigma2, m > 0`, `k >= 1`; `b` and `c` may be zero.
    pub fn validate(&self) -> Result<()> {
        let pos = [("a", self.a), ("d", self.d), ("sigma2", self.sigma2), ("m", self.m)];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} = {v} must be positive")));
            }
        }
        for (name, v) in [("b", self.b), ("c", self.c)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} = {v} must be nonnegative")));
            }
        }
        if self.k == 0 {
            return Err(Error::invalid("need at least one non-control arm"));
        }
        Ok(())
    }

    pub fn n_arms(&self) -> usize {
        self.k + 1
    }

    /// Noise variance of a cell average.
    pub fn s(&self) -> f64 {
        self.sigma2 / self.m
    }

    /// Shrinkage of arm contrasts under the joint rule.
    pub fn joint_factor(&self) -> f64 {
        self.d / (self.d + self.s())
    }

    /// Shrinkage under the arm-by-arm rule.
    pub fn separate_factor(&self) -> f64 {
        (self.b + self.d) / (self.b + self.d + self.s())
    }

    /// Shrinkage of the cell's across-arm average under the joint rule.
    pub fn joint_mean_factor(&self) -> f64 {
        let k1 = self.n_arms() as f64;
        (k1 * self.b + self.d) / (k1 * self.b + self.d + self.s())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_len(params: &NormalModelParams, ybar: &[f64], gamma: &[f64]) -> Result<()> {
    for v in [ybar, gamma] {
        if v.len() != params.n_arms() {
            return Err(Error::DimensionMismatch { expected: params.n_arms(), got: v.len() });
        }
    }
    Ok(())
}

/// Posterior mean of the cell's arm means given its averages and known
/// `alpha`, `gamma`.
pub fn joint_posterior_mean(ybar: &[f64], alpha: f64, gamma: &[f64], params: &NormalModelParams) -> Result<Vec<f64>> {
    check_len(params, ybar, gamma)?;
    let (gm, ym) = (mean(gamma), mean(ybar));
    let f = params.joint_factor();
    let level = alpha + gm + params.joint_mean_factor() * (ym - alpha - gm);
    Ok(ybar.iter().zip(gamma).map(|(y, g)| level + (g - gm) + f * ((y - ym) - (g - gm))).collect())
}

/// Arm-by-arm posterior mean using only each arm's own average.
pub fn separate_posterior_mean(ybar: &[f64], alpha: f64, gamma: &[f64], params: &NormalModelParams) -> Result<Vec<f64>> {
    check_len(params, ybar, gamma)?;
    let f = params.separate_factor();
    Ok(ybar.iter().zip(gamma).map(|(y, g)| alpha + g + f * (y - alpha - g)).collect())
}

/// Utility gain of the joint rule over random assignment, as a share of the
/// oracle's gain.
pub fn utility_ratio_joint(params: &NormalModelParams) -> f64 {
    let (c, d, s2, m) = (params.c, params.d, params.sigma2, params.m);
    (1.0 - d * s2 / ((m * d + s2) * (c + d))).sqrt()
}

/// Utility gain of the arm-by-arm rule as a share of the joint rule's gain.
pub fn utility_ratio_separate(params: &NormalModelParams) -> f64 {
    let (b, c, d, s) = (params.b, params.c, params.d, params.s());
    let big = b + d + s;
    let w = b + d;
    let u = d + s;
    (1.0 - c * b * b * s * s / ((c * big * big + w * w * u) * (c * u + d * d))).sqrt()
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

/// Streaming first and second moments of several per-draw quantities.
#[derive(Debug, Clone)]
struct Moments<const P: usize> {
    n: f64,
    sum: [f64; P],
    cross: [[f64; P]; P],
}

impl<const P: usize> Moments<P> {
    fn new() -> Self {
        Self { n: 0.0, sum: [0.0; P], cross: [[0.0; P]; P] }
    }

    fn push(&mut self, v: [f64; P]) {
        self.n += 1.0;
        for i in 0..P {
            self.sum[i] += v[i];
            for j in 0..P {
                self.cross[i][j] += v[i] * v[j];
            }
        }
    }

    fn merge(mut self, o: &Self) -> Self {
        self.n += o.n;
        for i in 0..P {
            self.sum[i] += o.sum[i];
            for j in 0..P {
                self.cross[i][j] += o.cross[i][j];
            }
        }
        self
    }

    fn mean(&self, i: usize) -> f64 {
        self.sum[i] / self.n
    }

    fn cov(&self, i: usize, j: usize) -> f64 {
        (self.cross[i][j] - self.sum[i] * self.sum[j] / self.n) / (self.n - 1.0)
    }

    fn estimate(&self, i: usize) -> Estimate {
        Estimate { mean: self.mean(i), se: (self.cov(i, i).max(0.0) / self.n).sqrt() }
    }

    /// `mean(i) / mean(j)` with a delta-method standard error.
    fn ratio(&self, i: usize, j: usize) -> Estimate {
        let (a, b) = (self.mean(i), self.mean(j));
        let r = a / b;
        let var = (self.cov(i, i) - 2.0 * r * self.cov(i, j) + r * r * self.cov(j, j)) / (b * b * self.n);
        Estimate { mean: r, se: var.max(0.0).sqrt() }
    }
}

const CHUNK: usize = 8192;

/// Runs `draws` iterations of `f` in fixed-size chunks with chunk-indexed
/// streams, merging moments in chunk order.
fn monte_carlo<const P: usize>(draws: usize, seed: u64, f: impl Fn(&mut rng::Rng) -> [f64; P] + Sync) -> Moments<P> {
    let chunks = draws.div_ceil(CHUNK);
    let parts: Vec<Moments<P>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::stream(seed, c as u64);
            let mut m = Moments::new();
            for _ in 0..CHUNK.min(draws - c * CHUNK) {
                m.push(f(&mut r));
            }
            m
        })
        .collect();
    parts.iter().fold(Moments::new(), |acc, p| acc.merge(p))
}

fn normal(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

fn argmax(v: &[f64]) -> usize {
    crate::tree::argmax_smallest(v.iter().map(|&x| Some(x))).expect("nonempty")
}

/// `E[max of count iid N(0,1)]` by Monte Carlo.
pub fn expected_max_std_gaussian(count: usize, draws: usize, seed: u64) -> Result<Estimate> {
    if count == 0 || draws < 2 {
        return Err(Error::invalid("need count >= 1 and at least 2 draws"));
    }
    let m = monte_carlo::<1>(draws, seed, |r| [(0..count).map(|_| normal(r)).fold(f64::NEG_INFINITY, f64::max)]);
    Ok(m.estimate(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub draws: usize,
    /// Gains `mu^rule - mean_k mu^k` per rule.
    pub utility_joint: Estimate,
    pub utility_separate: Estimate,
    pub utility_oracle: Estimate,
    pub utility_random: Estimate,
    pub best_arm_joint: Estimate,
    pub best_arm_separate: Estimate,
    pub best_arm_random: Estimate,
    /// `utility_joint / utility_oracle`.
    pub ratio_joint: Estimate,
    /// `utility_separate / utility_joint`.
    pub ratio_separate: Estimate,
}

/// Simulates cells in the known-`alpha`, known-`gamma` regime and scores the
/// joint, separate, oracle and random rules.
///
/// Utilities are measured relative to the cell's average arm mean, which
/// removes the level terms common to all rules.
pub fn mc_oracle(params: &NormalModelParams, draws: usize, seed: u64) -> Result<OracleSummary> {
    params.validate()?;
    if draws < 2 {
        return Err(Error::invalid("need at least 2 draws"));
    }
    let k1 = params.n_arms();
    let (sa, sb, sc, sd, ss) = (params.a.sqrt(), params.b.sqrt(), params.c.sqrt(), params.d.sqrt(), params.s().sqrt());
    let fj = params.joint_factor();
    let fs = params.separate_factor();
    let m = monte_carlo::<7>(draws, seed, |r| {
        let alpha = sa * normal(r);
        let beta = sb * normal(r);
        let mut mu = vec![0.0; k1];
        let mut joint = vec![0.0; k1];
        let mut sep = vec![0.0; k1];
        for k in 0..k1 {
            let gamma = sc * normal(r);
            let delta = sd * normal(r);
            mu[k] = alpha + beta + gamma + delta;
            let ybar = mu[k] + ss * normal(r);
            // Contrasts of the joint posterior mean; the level term is common to
            // all arms and cannot change the argmax.
            joint[k] = gamma + fj * (ybar - alpha - gamma);
            sep[k] = alpha + gamma + fs * (ybar - alpha - gamma);
        }
        let avg = mean(&mu);
        let best = argmax(&mu);
        let (aj, asep) = (argmax(&joint), argmax(&sep));
        let ar = r.random_range(0..k1);
        let hit = |a: usize| if a == best { 1.0 } else { 0.0 };
        [mu[aj] - avg, mu[asep] - avg, mu[best] - avg, mu[ar] - avg, hit(aj), hit(asep), hit(ar)]
    });
    Ok(OracleSummary {
        draws,
        utility_joint: m.estimate(0),
        utility_separate: m.estimate(1),
        utility_oracle: m.estimate(2),
        utility_random: m.estimate(3),
        best_arm_joint: m.estimate(4),
        best_arm_separate: m.estimate(5),
        best_arm_random: m.estimate(6),
        ratio_joint: m.ratio(0, 2),
        ratio_separate: m.ratio(1, 0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheck {
    /// `E[Y^{argmax X}]`.
    pub lhs: Estimate,
    /// `z / sqrt(x y) E[max Y]`.
    pub rhs: Estimate,
    /// Per-draw difference of the two sides.
    pub diff: Estimate,
}

impl LemmaCheck {
    pub fn passes(&self, n_se: f64) -> bool {
        self.diff.mean.abs() < n_se * self.diff.se
    }
}

/// Checks `E[Y^{argmax X}] = z / sqrt(x y) E[max Y]` for `X, Y` with
/// variances `x I`, `y I` and covariance `z I`.
pub fn lemma_check(x: f64, y: f64, z: f64, dim: usize, draws: usize, seed: u64) -> Result<LemmaCheck> {
    if !(x > 0.0 && y > 0.0) || z * z > x * y || dim == 0 || draws < 2 {
        return Err(Error::invalid(format!("inadmissible lemma inputs x={x}, y={y}, z={z}, dim={dim}")));
    }
    let scale = z / (x * y).sqrt();
    let slope = z / x;
    let resid_sd = (y - z * z / x).max(0.0).sqrt();
    let sx = x.sqrt();
    let m = monte_carlo::<3>(draws, seed, |r| {
        let mut best_x = f64::NEG_INFINITY;
        let mut y_at = 0.0;
        let mut max_y = f64::NEG_INFINITY;
        for _ in 0..dim {
            let xv = sx * normal(r);
            let yv = slope * xv + resid_sd * normal(r);
            if xv > best_x {
                best_x = xv;
                y_at = yv;
            }
            max_y = max_y.max(yv);
        }
        [y_at, scale * max_y, y_at - scale * max_y]
    });
    Ok(LemmaCheck { lhs: m.estimate(0), rhs: m.estimate(1), diff: m.estimate(2) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn ones() -> NormalModelParams {
        NormalModelParams { a: 1.0, b: 1.0, c: 1.0, d: 1.0, sigma2: 1.0, m: 1.0, k: 9 }
    }

    /// The ratio exactly as displayed, before simplification.
    fn displayed_separate_ratio(p: &NormalModelParams) -> f64 {
        let (b, c, d, s) = (p.b, p.c, p.d, p.s());
        let big = b + d + s;
        let num = (c * big + d * (b + d)).powi(2) * (d + s);
        let den = (c * big * big + (b + d).powi(2) * (d + s)) * (c * (d + s) + d * d);
        (num / den).sqrt()
    }

    #[test]
    fn zero_innovation_is_a_fixed_point() {
        let p = ones();
        let gamma: Vec<f64> = (0..10).map(|k| k as f64 * 0.3 - 1.0).collect();
        let ybar: Vec<f64> = gamma.iter().map(|g| g + 2.5).collect();
        for (got, want) in joint_posterior_mean(&ybar, 2.5, &gamma, &p).unwrap().iter().zip(&ybar) {
            assert!((got - want).abs() < 1e-14);
        }
        for (got, want) in separate_posterior_mean(&ybar, 2.5, &gamma, &p).unwrap().iter().zip(&ybar) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn large_d_leaves_contrasts_unshrunk() {
        let p = NormalModelParams { d: 1e12, ..ones() };
        let gamma = vec![0.0; 10];
        let ybar: Vec<f64> = (0..10).map(|k| (k * k) as f64).collect();
        let got = joint_posterior_mean(&ybar, 0.0, &gamma, &p).unwrap();
        let (gm, ym) = (mean(&got), mean(&ybar));
        for (g, y) in got.iter().zip(&ybar) {
            assert!(((g - gm) - (y - ym)).abs() < 1e-8);
        }
    }

    fn random_cell(seed: u64, p: &NormalModelParams) -> (Vec<f64>, f64, Vec<f64>) {
        let mut r = rng::rng_from_seed(seed);
        let gamma: Vec<f64> = (0..p.n_arms()).map(|_| normal(&mut r)).collect();
        let ybar: Vec<f64> = (0..p.n_arms()).map(|_| 3.0 * normal(&mut r)).collect();
        (ybar, normal(&mut r), gamma)
    }

    #[test]
    fn joint_mean_matches_single_cell_conditioning() {
        let p = NormalModelParams { b: 0.7, c: 1.3, d: 0.4, sigma2: 2.0, m: 3.0, k: 5, ..ones() };
        let n = p.n_arms();
        for seed in 0..10 {
            let (ybar, alpha, gamma) = random_cell(seed, &p);
            let prior = DMatrix::from_fn(n, n, |i, j| p.b + if i == j { p.d } else { 0.0 });
            let data = &prior + DMatrix::identity(n, n) * p.s();
            let centre = DVector::from_fn(n, |i, _| alpha + gamma[i]);
            let post = &centre + &prior * data.try_inverse().unwrap() * (DVector::from_vec(ybar.clone()) - &centre);
            let got = joint_posterior_mean(&ybar, alpha, &gamma, &p).unwrap();
            for i in 0..n {
                assert!((got[i] - post[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn separate_mean_matches_scalar_conjugate_update() {
        let p = NormalModelParams { b: 0.7, d: 0.4, sigma2: 2.0, m: 3.0, k: 4, ..ones() };
        let (ybar, alpha, gamma) = random_cell(3, &p);
        let got = separate_posterior_mean(&ybar, alpha, &gamma, &p).unwrap();
        for k in 0..p.n_arms() {
            let prior_var = p.b + p.d;
            let precision = 1.0 / prior_var + 1.0 / p.s();
            let post = ((alpha + gamma[k]) / prior_var + ybar[k] / p.s()) / precision;
            assert!((got[k] - post).abs() < 1e-12);
        }
    }

    #[test]
    fn b_zero_makes_rules_agree_on_contrasts() {
        let p = NormalModelParams { b: 0.0, ..ones() };
        let (ybar, alpha, gamma) = random_cell(4, &p);
        let j = joint_posterior_mean(&ybar, alpha, &gamma, &p).unwrap();
        let s = separate_posterior_mean(&ybar, alpha, &gamma, &p).unwrap();
        let (jm, sm) = (mean(&j), mean(&s));
        for (a, b) in j.iter().zip(&s) {
            assert!(((a - jm) - (b - sm)).abs() < 1e-12);
        }
    }

    /// Full posterior over `n_cells` cells with unknown `alpha`, `beta`,
    /// `gamma`, `delta`, by conditioning the joint Gaussian.
    #[test]
    fn joint_mean_approaches_many_cell_posterior() {
        let p = NormalModelParams { a: 1.0, b: 1.0, c: 1.0, d: 1.0, sigma2: 1.0, m: 10.0, k: 2 };
        let (n_cells, k1) = (200, p.n_arms());
        let mut r = rng::rng_from_seed(11);
        let alpha = normal(&mut r);
        let gamma: Vec<f64> = (0..k1).map(|_| p.c.sqrt() * normal(&mut r)).collect();
        let mut ybar = Vec::new();
        for _ in 0..n_cells {
            let beta = normal(&mut r);
            for g in &gamma {
                ybar.push(alpha + beta + g + p.d.sqrt() * normal(&mut r) + p.s().sqrt() * normal(&mut r));
            }
        }
        let dim = n_cells * k1;
        let cov = |i: usize, j: usize, noise: f64| {
            let (ci, ki, cj, kj) = (i / k1, i % k1, j / k1, j % k1);
            p.a + if ci == cj { p.b } else { 0.0 } + if ki == kj { p.c } else { 0.0 } + if i == j { p.d + noise } else { 0.0 }
        };
        let sigma_y = DMatrix::from_fn(dim, dim, |i, j| cov(i, j, p.s()));
        let weights = sigma_y.cholesky().unwrap().solve(&DVector::from_vec(ybar.clone()));
        for cell in [0, 57, 199] {
            let want: Vec<f64> = (0..k1).map(|k| (0..dim).map(|j| cov(cell * k1 + k, j, 0.0) * weights[j]).sum()).collect();
            let got = joint_posterior_mean(&ybar[cell * k1..(cell + 1) * k1], alpha, &gamma, &p).unwrap();
            for k in 0..k1 {
                assert!((got[k] - want[k]).abs() < 0.02, "cell {cell} arm {k}: {} vs {}", got[k], want[k]);
            }
        }
    }

    #[test]
    fn joint_ratio_is_shrunk_over_oracle_spread() {
        let grid = [0.1, 0.5, 1.0, 2.0, 5.0];
        for &c in &grid {
            for &d in &grid {
                for &m in &grid {
                    let p = NormalModelParams { c, d, m, sigma2: 1.3, ..ones() };
                    let direct = ((c + d * d / (d + p.s())) / (c + d)).sqrt();
                    assert!((utility_ratio_joint(&p) - direct).abs() < 1e-12);
                }
            }
            // With d = 1 the d-squared display coincides.
            let p = NormalModelParams { c, d: 1.0, m: 2.0, sigma2: 0.7, ..ones() };
            let display = (1.0 - p.d * p.d * p.sigma2 / ((p.m * p.d + p.sigma2) * (p.c + p.d))).sqrt();
            assert!((utility_ratio_joint(&p) - display).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_ratios() {
        assert!((utility_ratio_joint(&ones()) - 0.75f64.sqrt()).abs() < 1e-15);
        assert!((utility_ratio_joint(&ones()) - 0.866025).abs() < 1e-6);
        assert!((utility_ratio_separate(&ones()) - (50.0f64 / 51.0).sqrt()).abs() < 1e-15);
        assert!((utility_ratio_separate(&ones()) - 0.990148).abs() < 1e-6);
        assert_eq!(utility_ratio_separate(&NormalModelParams { b: 0.0, ..ones() }), 1.0);
        assert_eq!(utility_ratio_separate(&NormalModelParams { c: 0.0, ..ones() }), 1.0);
        assert!((utility_ratio_joint(&NormalModelParams { sigma2: 1e-12, ..ones() }) - 1.0).abs() < 1e-9);
        assert!((utility_ratio_joint(&NormalModelParams { d: 1e-9, ..ones() }) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn simplified_separate_ratio_equals_displayed_form() {
        let grid = [0.05, 0.3, 1.0, 2.5, 7.0];
        for &b in &grid {
            for &c in &grid {
                for &d in &grid {
                    for &s2 in &grid {
                        let p = NormalModelParams { b, c, d, sigma2: s2, m: 1.7, ..ones() };
                        assert!((utility_ratio_separate(&p) - displayed_separate_ratio(&p)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn ratio_monotonicity_and_bounds() {
        let grid = [0.1, 0.5, 1.0, 2.0, 5.0];
        for &c in &grid {
            for &d in &grid {
                let at = |s2: f64, m: f64, c: f64| utility_ratio_joint(&NormalModelParams { c, d, sigma2: s2, m, ..ones() });
                for w in grid.windows(2) {
                    assert!(at(w[1], 1.0, c) < at(w[0], 1.0, c));
                    assert!(at(1.0, w[1], c) > at(1.0, w[0], c));
                    assert!(at(1.0, 1.0, w[1] * c) > at(1.0, 1.0, w[0] * c));
                }
                let r = at(1.0, 1.0, c);
                assert!(r > 0.0 && r <= 1.0);
                for &b in &grid {
                    let p = NormalModelParams { b, c, d, ..ones() };
                    assert!(utility_ratio_separate(&p) < 1.0);
                }
            }
        }
    }

    #[test]
    fn expected_max_values() {
        assert!(expected_max_std_gaussian(1, 1000, 1).unwrap().mean.abs() < 0.1);
        let two = expected_max_std_gaussian(2, 1_000_000, 2).unwrap();
        assert!((two.mean - 1.0 / std::f64::consts::PI.sqrt()).abs() < 0.003);
        let ten = expected_max_std_gaussian(10, 1_000_000, 3).unwrap();
        assert!(ten.se < 0.002);
        let five = expected_max_std_gaussian(5, 1_000_000, 3).unwrap();
        assert!(two.mean < five.mean && five.mean < ten.mean);
        assert!(expected_max_std_gaussian(0, 10, 1).is_err());
    }

    #[test]
    fn oracle_sanity() {
        let p = NormalModelParams { k: 4, ..ones() };
        let s = mc_oracle(&p, 200_000, 5).unwrap();
        assert!(s.utility_random.mean.abs() < 3.0 * s.utility_random.se);
        assert!((s.best_arm_random.mean - 0.2).abs() < 3.0 * s.best_arm_random.se);
        assert!(s.utility_joint.mean + 3.0 * s.utility_joint.se >= s.utility_separate.mean);
        assert!(s.utility_separate.mean + 3.0 * s.utility_separate.se >= s.utility_random.mean);
        assert!((s.ratio_joint.mean - utility_ratio_joint(&p)).abs() < 3.0 * s.ratio_joint.se);
        assert_eq!(s, mc_oracle(&p, 200_000, 5).unwrap());
        let q = NormalModelParams { d: 3.0, c: 0.5, sigma2: 2.0, k: 6, ..ones() };
        let t = mc_oracle(&q, 200_000, 6).unwrap();
        assert!((t.ratio_joint.mean - utility_ratio_joint(&q)).abs() < 3.0 * t.ratio_joint.se);
        assert!((t.ratio_separate.mean - utility_ratio_separate(&q)).abs() < 3.0 * t.ratio_separate.se);
    }

    #[test]
    fn lemma_cases() {
        let same = lemma_check(1.5, 1.5, 1.5, 4, 100_000, 1).unwrap();
        assert!((same.lhs.mean - same.rhs.mean).abs() < 1e-12);
        let indep = lemma_check(1.0, 2.0, 0.0, 4, 200_000, 2).unwrap();
        assert!(indep.lhs.mean.abs() < 3.0 * indep.lhs.se);
        assert!(lemma_check(2.0, 1.0, 0.7, 5, 1_000_000, 3).unwrap().passes(3.0));
        assert!(lemma_check(1.0, 1.0, 1.5, 3, 100, 1).is_err());
    }
}
