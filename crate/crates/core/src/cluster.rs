//! Grouping arms by their cross-fitted outcome profiles.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::forest::{fit_forest, fit_forest_on_groups, AssignmentForest, ForestParams};
use crate::residualize::fold_labels;
use crate::rng;

/// Cross-fold predictions `yhat[i][k]` for every row and arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedValueMatrix {
    n: usize,
    n_arms: usize,
    /// Row-major `n x n_arms`.
    values: Vec<f64>,
    pub folds: Vec<usize>,
}

impl FittedValueMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.n_arms + k]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_arms..(i + 1) * self.n_arms]
    }

    /// The `n`-vector of predictions for arm `k`.
    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, k)).collect()
    }
}

/// Splits the rows into `folds` folds and predicts each fold's rows with an
/// assignment forest fit on the remaining folds.
///
/// An arm missing from every tree at a point falls back to that arm's mean
/// outcome in the off-fold data.
pub fn fold_fitted_values(data: &Dataset, params: &ForestParams, folds: usize, seed: u64) -> Result<FittedValueMatrix> {
    if folds < 2 {
        return Err(Error::invalid(format!("fitted values need at least 2 folds, got {folds}")));
    }
    let labels = fold_labels(data.n(), folds, seed);
    let k1 = data.n_arms();
    let per_fold = (0..folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..data.n()).filter(|&i| labels[i] != f).collect();
            let sub = data.subset(&train);
            sub.require_all_arms(&format!("off-fold sample for fold {f}"))?;
            let mut fp = *params;
            fp.tree.seed = rng::derive_seed(seed, f as u64 + 1);
            let forest = fit_forest(&sub, &fp)?;
            let counts = sub.arm_counts();
            let mut sums = vec![0.0; k1];
            for (y, &a) in sub.outcomes().iter().zip(sub.arms()) {
                sums[a] += y;
            }
            let fallback: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
            (0..data.n())
                .filter(|&i| labels[i] == f)
                .map(|i| {
                    let est = forest.predict_arm_outcomes(data.row(i))?;
                    Ok((i, est.iter().zip(&fallback).map(|(e, fb)| e.unwrap_or(*fb)).collect::<Vec<_>>()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut values = vec![0.0; data.n() * k1];
    for (i, row) in per_fold.into_iter().flatten() {
        values[i * k1..(i + 1) * k1].copy_from_slice(&row);
    }
    Ok(FittedValueMatrix { n: data.n(), n_arms: k1, values, folds: labels })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansSettings {
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop once inertia falls by no more than `tol` times its previous value.
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansSettings {
    fn default() -> Self {
        Self { restarts: 10, max_iter: 100, tol: 1e-8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    /// Cluster per point, numbered by first appearance.
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    pub restarts: usize,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            (0..points.len()).find(|i| !chosen.contains(i)).expect("k does not exceed point count")
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn centroids_of(points: &[Vec<f64>], labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        for v in s.iter_mut() {
            *v /= c as f64;
        }
    }
    sums
}

/// Reassigns points so that every cluster is nonempty: each empty cluster
/// takes the point farthest from its centroid among clusters of size > 1.
fn fill_empty(points: &[Vec<f64>], labels: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return };
        let mut far = (usize::MAX, -1.0);
        for (i, p) in points.iter().enumerate() {
            if counts[labels[i]] > 1 {
                let d = sq_dist(p, &centroids[labels[i]]);
                if d > far.1 {
                    far = (i, d);
                }
            }
        }
        labels[far.0] = empty;
    }
}

fn inertia_of(points: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points.iter().zip(labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum()
}

fn lloyd(points: &[Vec<f64>], k: usize, s: &KMeansSettings, rng: &mut rng::Rng) -> (Vec<usize>, f64, usize, Vec<f64>) {
    let mut centroids = plus_plus_init(points, k, rng);
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    fill_empty(points, &mut labels, &centroids, k);
    centroids = centroids_of(points, &labels, k);
    let mut inertia = inertia_of(points, &labels, &centroids);
    let mut trace = vec![inertia];
    let mut iterations = 0;
    while iterations < s.max_iter {
        iterations += 1;
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        fill_empty(points, &mut next, &centroids, k);
        if next == labels {
            break;
        }
        let new_centroids = centroids_of(points, &next, k);
        let new_inertia = inertia_of(points, &next, &new_centroids);
        if new_inertia > inertia {
            // Only empty-cluster repair can raise inertia; keep the better state.
            break;
        }
        let done = inertia - new_inertia <= s.tol * inertia;
        labels = next;
        centroids = new_centroids;
        inertia = new_inertia;
        trace.push(inertia);
        if done {
            break;
        }
    }
    if hartigan(points, &mut labels, &mut centroids, k) {
        inertia = inertia_of(points, &labels, &centroids);
        trace.push(inertia);
    }
    (labels, inertia, iterations, trace)
}

/// Single-point moves that lower inertia once the centroid shift is
/// counted: moving `x` from `a` (size `n_a`) to `b` changes inertia by
/// `n_b/(n_b+1)|x-c_b|^2 - n_a/(n_a-1)|x-c_a|^2`. Lloyd's rule ignores the
/// shift and can stall where such a move still helps. Returns whether any
/// point moved.
fn hartigan(points: &[Vec<f64>], labels: &mut [usize], centroids: &mut Vec<Vec<f64>>, k: usize) -> bool {
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    let mut moved_any = false;
    // Each accepted move strictly lowers inertia, so this terminates; the
    // cap only guards against rounding cycles.
    for _ in 0..points.len() * 100 {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let a = labels[i];
            if counts[a] < 2 {
                continue;
            }
            let na = counts[a] as f64;
            let cost_out = na / (na - 1.0) * sq_dist(p, &centroids[a]);
            let mut best: Option<(usize, f64)> = None;
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let delta = nb / (nb + 1.0) * sq_dist(p, &centroids[b]) - cost_out;
                if delta < -1e-12 * cost_out.max(f64::MIN_POSITIVE) && best.is_none_or(|(_, d)| delta < d) {
                    best = Some((b, delta));
                }
            }
            if let Some((b, _)) = best {
                labels[i] = b;
                counts[a] -= 1;
                counts[b] += 1;
                *centroids = centroids_of(points, labels, k);
                moved = true;
                moved_any = true;
            }
        }
        if !moved {
            break;
        }
    }
    moved_any
}

fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// k-means with k-means++ seeding, best of `restarts` runs by inertia.
pub fn kmeans(points: &[Vec<f64>], k: usize, settings: &KMeansSettings) -> Result<KMeansResult> {
    if points.is_empty() {
        return Err(Error::Empty("k-means input".into()));
    }
    if k == 0 || k > points.len() {
        return Err(Error::invalid(format!("cannot form {k} clusters from {} vectors", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, got: points.iter().find(|p| p.len() != dim).unwrap().len() });
    }
    if settings.restarts == 0 {
        return Err(Error::invalid("k-means needs at least one restart"));
    }
    let runs: Vec<_> = (0..settings.restarts)
        .into_par_iter()
        .map(|r| lloyd(points, k, settings, &mut rng::stream(settings.seed, r as u64)))
        .collect();
    let mut best = 0;
    for (r, run) in runs.iter().enumerate() {
        if run.1 < runs[best].1 {
            best = r;
        }
    }
    let (labels, inertia, iterations, inertia_trace) = runs.into_iter().nth(best).unwrap();
    Ok(KMeansResult { labels: canonical(&labels), inertia, iterations, restarts: settings.restarts, inertia_trace })
}

/// Arm-to-group map with diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmClustering {
    /// Group of each original arm.
    pub labels: Vec<usize>,
    pub n_groups: usize,
    pub control_held_out: bool,
    pub inertia: f64,
    pub iterations: usize,
    pub restarts: usize,
}

impl ArmClustering {
    /// Each arm alone in its own group.
    pub fn identity(n_arms: usize) -> Self {
        Self { labels: (0..n_arms).collect(), n_groups: n_arms, control_held_out: true, inertia: 0.0, iterations: 0, restarts: 0 }
    }
}

/// Clusters the arms' fitted-value columns into `m` groups of non-control
/// arms plus a control group when `hold_out_control`, or into `m + 1`
/// groups of all arms otherwise.
pub fn cluster_arms(fv: &FittedValueMatrix, m: usize, hold_out_control: bool, settings: &KMeansSettings) -> Result<ArmClustering> {
    let k = fv.n_arms().saturating_sub(1);
    if m < 1 || m > k {
        return Err(Error::invalid(format!("group count {m} outside 1..={k}")));
    }
    let first = usize::from(hold_out_control);
    let points: Vec<Vec<f64>> = (first..fv.n_arms()).map(|a| fv.column(a)).collect();
    let target = if hold_out_control { m } else { m + 1 };
    let res = kmeans(&points, target, settings)?;
    let labels = if hold_out_control {
        std::iter::once(0).chain(res.labels.iter().map(|l| l + 1)).collect()
    } else {
        res.labels.clone()
    };
    Ok(ArmClustering { labels, n_groups: m + 1, control_held_out: hold_out_control, inertia: res.inertia, iterations: res.iterations, restarts: res.restarts })
}

/// Grows trees on group labels and estimates per original arm in each leaf.
pub fn fit_clustered_forest(data: &Dataset, clustering: &ArmClustering, params: &ForestParams) -> Result<AssignmentForest> {
    if clustering.labels.len() != data.n_arms() {
        return Err(Error::DimensionMismatch { expected: data.n_arms(), got: clustering.labels.len() });
    }
    let mut seen = vec![false; clustering.n_groups];
    for &l in &clustering.labels {
        *seen.get_mut(l).ok_or_else(|| Error::invalid(format!("group label {l} out of range")))? = true;
    }
    if seen.contains(&false) {
        return Err(Error::invalid("clustering leaves a group empty"));
    }
    fit_forest_on_groups(data, Some(&clustering.labels), params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::TreeGrowParams;

    fn settings() -> KMeansSettings {
        KMeansSettings { seed: 3, ..Default::default() }
    }

    fn toy_data(seed: u64, n: usize, n_arms: usize) -> Dataset {
        let mut r = rng::rng_from_seed(seed);
        let arms: Vec<usize> = (0..n).map(|i| if i < n_arms { i } else { r.random_range(0..n_arms) }).collect();
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let a = arms[i] as f64;
                (if x[i] > 0.0 { a } else { -a }) + r.random_range(-0.5..0.5)
            })
            .collect();
        Dataset::new(y, arms, x, 1, None).unwrap()
    }

    fn forest_params(seed: u64) -> ForestParams {
        ForestParams { tree: TreeGrowParams { seed, epsilon: 0.0, ..Default::default() }, n_trees: 20, ..Default::default() }
    }

    #[test]
    fn point_moves_escape_a_lloyd_fixed_point() {
        // Lloyd alone stops at inertia 31.31 from some seeds here; the
        // optimum isolates the last point.
        let pts = vec![
            vec![-0.42181235340059864, 0.9958266807181682, 0.17415179392712865],
            vec![1.3608905709547443, 3.2844865684745255, 0.5612700376291375],
            vec![1.2757714157724553, 3.6410422141416117, 2.92672691345871],
            vec![-0.2812923799220579, -1.7250746302146114, 3.0649329574243023],
            vec![-1.9857754712857911, 3.4010157229978066, -2.7190780699290484],
        ];
        for seed in 0..200 {
            let r = kmeans(&pts, 2, &KMeansSettings { restarts: 1, seed, ..Default::default() }).unwrap();
            assert!(r.inertia < 28.3, "seed {seed}: {}", r.inertia);
            assert!(r.inertia_trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn one_cluster_per_vector_has_zero_inertia() {
        let pts = vec![vec![0.0, 1.0], vec![5.0, 5.0], vec![-3.0, 2.0]];
        let r = kmeans(&pts, 3, &settings()).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert_eq!(r.labels, vec![0, 1, 2]);
    }

    #[test]
    fn duplicates_are_co_clustered() {
        let u = vec![1.0, 2.0, 3.0];
        let v = vec![-4.0, 0.0, 9.0];
        let r = kmeans(&[u.clone(), v.clone(), u, v], 2, &settings()).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert_eq!(r.labels, vec![0, 1, 0, 1]);
    }

    #[test]
    fn identical_vectors_still_fill_every_cluster() {
        let pts = vec![vec![2.0, 2.0]; 4];
        let r = kmeans(&pts, 3, &settings()).unwrap();
        let mut l = r.labels.clone();
        l.sort_unstable();
        l.dedup();
        assert_eq!(l, vec![0, 1, 2]);
        assert_eq!(r.inertia, 0.0);
        assert!(kmeans(&pts, 5, &settings()).is_err());
        assert!(kmeans(&pts, 0, &settings()).is_err());
    }

    fn brute_force_two_partition(pts: &[Vec<f64>]) -> f64 {
        let n = pts.len();
        let mut best = f64::INFINITY;
        for mask in 1..(1u32 << (n - 1)) {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let c = centroids_of(pts, &labels, 2);
            best = best.min(inertia_of(pts, &labels, &c));
        }
        best
    }

    #[test]
    fn matches_exhaustive_two_partition() {
        let mut r = rng::rng_from_seed(11);
        for _ in 0..20 {
            let pts: Vec<Vec<f64>> = (0..5)
                .map(|i| {
                    let centre = if i % 2 == 0 { 0.0 } else { 20.0 };
                    (0..4).map(|_| centre + r.random_range(-3.0..3.0)).collect()
                })
                .collect();
            let oracle = brute_force_two_partition(&pts);
            let got = kmeans(&pts, 2, &settings()).unwrap();
            assert!((got.inertia - oracle).abs() < 1e-9 * oracle.max(1.0));
        }
    }

    #[test]
    fn inertia_never_increases_and_is_reproducible() {
        let mut r = rng::rng_from_seed(12);
        let pts: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| r.random_range(-5.0..5.0)).collect()).collect();
        let res = kmeans(&pts, 4, &settings()).unwrap();
        assert!(res.inertia_trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(res, kmeans(&pts, 4, &settings()).unwrap());
        for seed in 0..5 {
            let single = kmeans(&pts, 4, &KMeansSettings { restarts: 1, seed, ..settings() });
            let _ = single.unwrap();
        }
        let per_run: Vec<f64> = (0..10).map(|r| lloyd(&pts, 4, &settings(), &mut rng::stream(3, r)).1).collect();
        assert_eq!(res.inertia, per_run.iter().cloned().fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn constant_outcomes_give_constant_fitted_values() {
        let base = toy_data(1, 200, 3);
        let d = base.with_outcomes(vec![2.5; 200]).unwrap();
        let fv = fold_fitted_values(&d, &forest_params(1), 2, 5).unwrap();
        for i in 0..fv.n() {
            assert!(fv.row(i).iter().all(|v| (v - 2.5).abs() < 1e-12));
        }
    }

    #[test]
    fn own_row_prediction_ignores_own_outcome() {
        let d = toy_data(2, 200, 3);
        let p = forest_params(2);
        let fv = fold_fitted_values(&d, &p, 2, 6).unwrap();
        let mut y = d.outcomes().to_vec();
        y[7] += 500.0;
        let fv2 = fold_fitted_values(&d.with_outcomes(y).unwrap(), &p, 2, 6).unwrap();
        assert_eq!(fv.row(7), fv2.row(7));
        assert!((0..200).any(|i| fv.folds[i] != fv.folds[7] && fv.row(i) != fv2.row(i)));
    }

    #[test]
    fn cluster_arms_labels() {
        let d = toy_data(3, 400, 5);
        let fv = fold_fitted_values(&d, &forest_params(3), 2, 7).unwrap();
        let id = cluster_arms(&fv, 4, true, &settings()).unwrap();
        assert_eq!(id.labels, vec![0, 1, 2, 3, 4]);
        assert_eq!(id.n_groups, 5);
        let two = cluster_arms(&fv, 2, true, &settings()).unwrap();
        assert_eq!(two.labels[0], 0);
        assert!(two.labels[1..].iter().all(|&l| (1..=2).contains(&l)));
        let all = cluster_arms(&fv, 2, false, &settings()).unwrap();
        assert_eq!(all.labels.iter().max(), Some(&2));
        assert!(cluster_arms(&fv, 0, true, &settings()).is_err());
        assert!(cluster_arms(&fv, 5, true, &settings()).is_err());
    }

    #[test]
    fn duplicate_columns_share_a_group() {
        let n = 30;
        let mut values = Vec::new();
        for i in 0..n {
            let t = i as f64;
            values.extend([0.0, t, t, -t, 100.0]);
        }
        let fv = FittedValueMatrix { n, n_arms: 5, values, folds: vec![0; n] };
        let c = cluster_arms(&fv, 3, true, &settings()).unwrap();
        assert_eq!(c.labels[1], c.labels[2]);
        assert_ne!(c.labels[1], c.labels[3]);
    }

    #[test]
    fn identity_clustering_matches_unclustered_forest() {
        let d = toy_data(4, 300, 4);
        let p = forest_params(8);
        let plain = fit_forest(&d, &p).unwrap();
        let clustered = fit_clustered_forest(&d, &ArmClustering::identity(4), &p).unwrap();
        let mut r = rng::rng_from_seed(9);
        for _ in 0..100 {
            let x = [r.random_range(-1.0..1.0)];
            assert_eq!(plain.assign(&x).unwrap(), clustered.assign(&x).unwrap());
            assert_eq!(plain.predict_arm_outcomes(&x).unwrap(), clustered.predict_arm_outcomes(&x).unwrap());
        }
    }

    #[test]
    fn pooled_treatment_groups_keep_per_arm_estimates() {
        let d = toy_data(5, 400, 4);
        let c = ArmClustering { labels: vec![0, 1, 1, 1], n_groups: 2, control_held_out: true, inertia: 0.0, iterations: 0, restarts: 0 };
        let f = fit_clustered_forest(&d, &c, &forest_params(10)).unwrap();
        for t in f.trees() {
            assert_eq!(t.tree.n_arms(), 2);
        }
        let est = f.predict_arm_outcomes(&[0.8]).unwrap();
        assert_eq!(est.len(), 4);
        assert!(est[1] != est[2] && est[2] != est[3]);
        assert_eq!(f.assign(&[0.8]).unwrap(), 3);
        let bad = ArmClustering { labels: vec![0, 2, 2, 2], n_groups: 3, ..c };
        assert!(fit_clustered_forest(&d, &bad, &forest_params(10)).is_err());
    }
}
