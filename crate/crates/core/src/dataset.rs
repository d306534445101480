//! Experimental data: outcomes, randomized arm labels, covariates and
//! assignment propensities.

use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Tolerance for propensities summing to one.
pub const PROPENSITY_SUM_TOL: f64 = 1e-9;

/// An immutable table of `(outcome, arm, covariates)` rows.
///
/// Arms are dense labels `0..n_arms`, with arm 0 conventionally the control.
/// Covariates are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    outcomes: Vec<f64>,
    raw_outcomes: Option<Vec<f64>>,
    arms: Vec<usize>,
    covariates: Vec<f64>,
    d: usize,
    n_arms: usize,
    arm_propensities: Vec<f64>,
    row_propensities: Option<Vec<f64>>,
    weights: Option<Vec<f64>>,
}

impl Dataset {
    /// Builds a validated dataset.
    ///
    /// `covariates` is row-major with `d` columns. When `propensities` is
    /// `None` the empirical arm shares `N^k / N` are used.
    pub fn new(
        outcomes: Vec<f64>,
        arms: Vec<usize>,
        covariates: Vec<f64>,
        d: usize,
        propensities: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = outcomes.len();
        if n == 0 {
            return Err(Error::Empty("dataset has no rows".into()));
        }
        if arms.len() != n {
            return Err(Error::invalid(format!("{} arm labels for {n} outcomes", arms.len())));
        }
        if covariates.len() != n * d {
            return Err(Error::DimensionMismatch { expected: n * d, got: covariates.len() });
        }
        if let Some(row) = outcomes.iter().position(|y| !y.is_finite()) {
            return Err(Error::NonFinite { column: "y".into(), row });
        }
        if let Some(pos) = covariates.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { column: format!("x{}", pos % d.max(1) + 1), row: pos / d.max(1) });
        }
        let max = *arms.iter().max().expect("nonempty");
        let counts = arm_counts(&arms, max + 1);
        if let Some(missing) = counts.iter().position(|&c| c == 0) {
            return Err(Error::ArmLabelGap { missing, max });
        }
        let n_arms = max + 1;
        let arm_propensities = match propensities {
            Some(p) => {
                validate_propensities(&p, n_arms)?;
                p
            }
            None => counts.iter().map(|&c| c as f64 / n as f64).collect(),
        };
        Ok(Self {
            outcomes,
            raw_outcomes: None,
            arms,
            covariates,
            d,
            n_arms,
            arm_propensities,
            row_propensities: None,
            weights: None,
        })
    }

    /// Convenience constructor from per-row covariate vectors.
    pub fn from_rows(outcomes: Vec<f64>, arms: Vec<usize>, rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: bad.len() });
        }
        let covariates = rows.iter().flatten().copied().collect();
        Self::new(outcomes, arms, covariates, d, None)
    }

    /// Attaches per-row propensities `p^{T_i}(X_i)` of the observed arm.
    pub fn with_row_propensities(mut self, p: Vec<f64>) -> Result<Self> {
        if p.len() != self.n() {
            return Err(Error::invalid("row propensity column has the wrong length"));
        }
        if let Some(i) = p.iter().position(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::ZeroPropensity { arm: self.arms[i] });
        }
        self.row_propensities = Some(p);
        Ok(self)
    }

    /// Attaches positive per-row utility weights `v(X_i)`.
    pub fn with_weights(mut self, w: Vec<f64>) -> Result<Self> {
        if w.len() != self.n() {
            return Err(Error::invalid("weight column has the wrong length"));
        }
        if w.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::invalid("weights must be positive and finite"));
        }
        self.weights = Some(w);
        Ok(self)
    }

    /// Replaces the outcomes, keeping the current ones as raw outcomes.
    pub fn with_outcomes(&self, outcomes: Vec<f64>) -> Result<Self> {
        if outcomes.len() != self.n() {
            return Err(Error::invalid("replacement outcomes have the wrong length"));
        }
        if let Some(row) = outcomes.iter().position(|y| !y.is_finite()) {
            return Err(Error::NonFinite { column: "y".into(), row });
        }
        let mut out = self.clone();
        out.raw_outcomes = Some(self.raw_outcomes().to_vec());
        out.outcomes = outcomes;
        Ok(out)
    }

    /// Rows at `indices`, keeping arm count and propensities of `self`.
    ///
    /// Arms may be absent from the result; learners check with
    /// [`Dataset::require_all_arms`].
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let pick = |v: &Vec<f64>| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let mut covariates = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            covariates.extend_from_slice(self.row(i));
        }
        Dataset {
            outcomes: pick(&self.outcomes),
            raw_outcomes: self.raw_outcomes.as_ref().map(pick),
            arms: indices.iter().map(|&i| self.arms[i]).collect(),
            covariates,
            d: self.d,
            n_arms: self.n_arms,
            arm_propensities: self.arm_propensities.clone(),
            row_propensities: self.row_propensities.as_ref().map(pick),
            weights: self.weights.as_ref().map(pick),
        }
    }

    /// Relabels arms through `map` (original arm -> group), summing the
    /// per-arm propensities within each group.
    pub fn relabel_arms(&self, map: &[usize], n_groups: usize) -> Result<Dataset> {
        if map.len() != self.n_arms {
            return Err(Error::invalid(format!("arm map covers {} arms, data has {}", map.len(), self.n_arms)));
        }
        if map.iter().any(|&g| g >= n_groups) {
            return Err(Error::invalid("arm map label out of range"));
        }
        let mut p = vec![0.0; n_groups];
        for (arm, &g) in map.iter().enumerate() {
            p[g] += self.arm_propensities[arm];
        }
        let mut out = self.clone();
        out.arms = self.arms.iter().map(|&a| map[a]).collect();
        out.n_arms = n_groups;
        out.arm_propensities = p;
        Ok(out)
    }

    /// Fails when some arm has no rows.
    pub fn require_all_arms(&self, context: &str) -> Result<()> {
        match self.arm_counts().iter().position(|&c| c == 0) {
            Some(arm) => Err(Error::ArmAbsent { arm, context: context.to_string() }),
            None => Ok(()),
        }
    }

    pub fn n(&self) -> usize {
        self.outcomes.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of arms, `K + 1`.
    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    /// Outcomes the learners fit on (residualized when applicable).
    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    /// Outcomes before any residualization.
    pub fn raw_outcomes(&self) -> &[f64] {
        self.raw_outcomes.as_deref().unwrap_or(&self.outcomes)
    }

    pub fn is_residualized(&self) -> bool {
        self.raw_outcomes.is_some()
    }

    pub fn arms(&self) -> &[usize] {
        &self.arms
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.d..(i + 1) * self.d]
    }

    pub fn x(&self, i: usize, j: usize) -> f64 {
        self.covariates[i * self.d + j]
    }

    /// Per-arm propensities `p^k` (empirical shares unless supplied).
    pub fn arm_propensities(&self) -> &[f64] {
        &self.arm_propensities
    }

    pub fn row_propensities(&self) -> Option<&[f64]> {
        self.row_propensities.as_deref()
    }

    /// Propensity of row `i`'s observed arm.
    pub fn propensity(&self, i: usize) -> f64 {
        match &self.row_propensities {
            Some(p) => p[i],
            None => self.arm_propensities[self.arms[i]],
        }
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    pub fn arm_counts(&self) -> Vec<usize> {
        arm_counts(&self.arms, self.n_arms)
    }

    /// Indices of rows grouped by arm.
    pub fn rows_by_arm(&self) -> Vec<Vec<usize>> {
        let mut by_arm = vec![Vec::new(); self.n_arms];
        for (i, &a) in self.arms.iter().enumerate() {
            by_arm[a].push(i);
        }
        by_arm
    }
}

fn arm_counts(arms: &[usize], n_arms: usize) -> Vec<usize> {
    let mut counts = vec![0; n_arms];
    for &a in arms {
        counts[a] += 1;
    }
    counts
}

fn validate_propensities(p: &[f64], n_arms: usize) -> Result<()> {
    if p.len() != n_arms {
        return Err(Error::invalid(format!("{} propensities for {n_arms} arms", p.len())));
    }
    if let Some(arm) = p.iter().position(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(Error::ZeroPropensity { arm });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROPENSITY_SUM_TOL {
        return Err(Error::PropensitySum(sum));
    }
    Ok(())
}

/// Column names for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub outcome: String,
    pub arm: String,
    /// Covariates are `{prefix}1 .. {prefix}d`.
    pub covariate_prefix: String,
    pub propensity: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self { outcome: "y".into(), arm: "t".into(), covariate_prefix: "x".into(), propensity: "p".into() }
    }
}

impl CsvSchema {
    /// Positions of `x1..xd` in `headers`, requiring a contiguous run from 1.
    fn covariate_columns(&self, headers: &csv::StringRecord) -> Result<Vec<usize>> {
        let mut found: Vec<(usize, usize)> = headers
            .iter()
            .enumerate()
            .filter_map(|(pos, h)| {
                h.trim().strip_prefix(&self.covariate_prefix)?.parse::<usize>().ok().map(|j| (j, pos))
            })
            .collect();
        found.sort_unstable();
        if found.is_empty() {
            return Err(Error::MissingColumn(format!("{}1", self.covariate_prefix)));
        }
        for (expect, &(j, _)) in (1..).zip(&found) {
            if j != expect {
                return Err(Error::MissingColumn(format!("{}{expect}", self.covariate_prefix)));
            }
        }
        Ok(found.into_iter().map(|(_, pos)| pos).collect())
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim() == name)
}

fn parse_f64(record: &csv::StringRecord, pos: usize, column: &str, row: usize) -> Result<f64> {
    let raw = record.get(pos).unwrap_or("").trim();
    let v: f64 =
        raw.parse().map_err(|_| Error::Parse { column: column.into(), row, value: raw.into() })?;
    if !v.is_finite() {
        return Err(Error::NonFinite { column: column.into(), row });
    }
    Ok(v)
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

/// Reads a dataset from a CSV file with columns `y`, `t`, `x1..xd` and an
/// optional per-row propensity column `p`.
///
/// When `p` is constant within every arm it becomes the per-arm propensity
/// vector (which must then sum to one); otherwise it is kept per row and the
/// empirical shares serve as the per-arm vector.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = open_csv(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::Empty(format!("{} has no header", path.display())));
    }
    let y_col = column(&headers, &schema.outcome).ok_or_else(|| Error::MissingColumn(schema.outcome.clone()))?;
    let t_col = column(&headers, &schema.arm).ok_or_else(|| Error::MissingColumn(schema.arm.clone()))?;
    let x_cols = schema.covariate_columns(&headers)?;
    let p_col = column(&headers, &schema.propensity);
    let d = x_cols.len();

    let (mut ys, mut ts, mut xs, mut ps) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        ys.push(parse_f64(&record, y_col, &schema.outcome, row)?);
        let raw = record.get(t_col).unwrap_or("").trim();
        let t: usize = raw
            .parse()
            .map_err(|_| Error::Parse { column: schema.arm.clone(), row, value: raw.into() })?;
        ts.push(t);
        for (j, &pos) in x_cols.iter().enumerate() {
            xs.push(parse_f64(&record, pos, &format!("{}{}", schema.covariate_prefix, j + 1), row)?);
        }
        if let Some(pos) = p_col {
            ps.push(parse_f64(&record, pos, &schema.propensity, row)?);
        }
    }
    if ys.is_empty() {
        return Err(Error::Empty(format!("{} has no data rows", path.display())));
    }
    let data = Dataset::new(ys, ts, xs, d, None)?;
    if p_col.is_none() {
        return Ok(data);
    }
    if let Some(i) = ps.iter().position(|&p| p <= 0.0) {
        return Err(Error::ZeroPropensity { arm: data.arms[i] });
    }
    let mut per_arm: Vec<Option<f64>> = vec![None; data.n_arms];
    let mut constant = true;
    for (&a, &p) in data.arms.iter().zip(&ps) {
        match per_arm[a] {
            None => per_arm[a] = Some(p),
            Some(q) if q != p => constant = false,
            _ => {}
        }
    }
    if constant {
        let p: Vec<f64> = per_arm.into_iter().map(|p| p.expect("every arm observed")).collect();
        Dataset::new(data.outcomes, data.arms, data.covariates, d, Some(p))
    } else {
        data.with_row_propensities(ps)
    }
}

/// Reads covariate rows `x1..xd` (other columns ignored) for prediction.
pub fn load_covariates_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<(Vec<f64>, usize)> {
    let path = path.as_ref();
    let mut reader = open_csv(path)?;
    let headers = reader.headers()?.clone();
    let x_cols = schema.covariate_columns(&headers)?;
    let mut xs = Vec::new();
    let mut rows = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for (j, &pos) in x_cols.iter().enumerate() {
            xs.push(parse_f64(&record, pos, &format!("{}{}", schema.covariate_prefix, j + 1), row)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Empty(format!("{} has no data rows", path.display())));
    }
    Ok((xs, x_cols.len()))
}

/// Writes a dataset as CSV with columns `y,t,x1..xd` (plus `p` when row
/// propensities are attached).
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["y".to_string(), "t".to_string()];
    header.extend((1..=data.d).map(|j| format!("x{j}")));
    if data.row_propensities.is_some() {
        header.push("p".into());
    }
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec = vec![data.raw_outcomes()[i].to_string(), data.arms[i].to_string()];
        rec.extend(data.row(i).iter().map(f64::to_string));
        if let Some(p) = &data.row_propensities {
            rec.push(p[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(())
}

/// How to draw a per-tree subsample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSpec {
    /// Fraction `beta` in `(0, 1]`.
    pub fraction: f64,
    pub stratify_by_arm: bool,
    pub seed: u64,
}

/// `ceil(fraction * count)` guarded against representation error
/// (`0.1 * 30` must give 3, not 4).
pub(crate) fn ceil_fraction(fraction: f64, count: usize) -> usize {
    let exact = fraction * count as f64;
    let r = exact.round();
    if (exact - r).abs() <= 1e-9 * exact.abs().max(1.0) {
        r as usize
    } else {
        exact.ceil() as usize
    }
}

/// Draws a subsample without replacement.
///
/// When stratified, each arm contributes `ceil(beta * N^k)` rows drawn
/// independently, so the total may exceed `ceil(beta * n)` by up to the
/// number of arms. Returns sorted indices.
pub fn stratified_subsample(data: &Dataset, spec: &SubsampleSpec) -> Result<Vec<usize>> {
    subsample_labels(data.arms(), data.n_arms(), spec)
}

pub(crate) fn subsample_labels(labels: &[usize], n_labels: usize, spec: &SubsampleSpec) -> Result<Vec<usize>> {
    if !(spec.fraction > 0.0 && spec.fraction <= 1.0) {
        return Err(Error::invalid(format!("subsample fraction {} outside (0, 1]", spec.fraction)));
    }
    let mut rng = rng::rng_from_seed(spec.seed);
    let mut out = if spec.stratify_by_arm {
        let mut groups = vec![Vec::new(); n_labels];
        for (i, &a) in labels.iter().enumerate() {
            groups[a].push(i);
        }
        let mut out = Vec::new();
        for group in &groups {
            let take = ceil_fraction(spec.fraction, group.len());
            out.extend(index::sample(&mut rng, group.len(), take).into_iter().map(|j| group[j]));
        }
        out
    } else {
        let take = ceil_fraction(spec.fraction, labels.len());
        index::sample(&mut rng, labels.len(), take).into_vec()
    };
    out.sort_unstable();
    Ok(out)
}

/// Population standard deviation (divisor `n`) of the outcomes.
pub fn sd_outcome(data: &Dataset) -> Result<f64> {
    sd_population(data.outcomes())
}

pub(crate) fn sd_population(ys: &[f64]) -> Result<f64> {
    if ys.len() < 2 {
        return Err(Error::TooFewRows { have: ys.len(), need: 2 });
    }
    // Welford
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, &y) in ys.iter().enumerate() {
        let delta = y - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (y - mean);
    }
    Ok((m2 / ys.len() as f64).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn toy(arms: Vec<usize>) -> Dataset {
        let n = arms.len();
        Dataset::new((0..n).map(|i| i as f64).collect(), arms, (0..n).map(|i| i as f64).collect(), 1, None)
            .unwrap()
    }

    #[test]
    fn empirical_shares_without_p_column() {
        let f = write_tmp("y,t,x1\n1.0,0,0.1\n2.0,1,0.2\n3.0,0,0.3\n4.0,1,0.4\n");
        let data = load_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(data.n(), 4);
        assert_eq!(data.d(), 1);
        assert_eq!(data.arm_propensities(), &[0.5, 0.5]);
    }

    #[test]
    fn arm_label_gap_is_rejected() {
        let f = write_tmp("y,t,x1\n1.0,0,0.1\n2.0,2,0.2\n");
        let err = load_csv(f.path(), &CsvSchema::default()).unwrap_err();
        assert!(matches!(err, Error::ArmLabelGap { missing: 1, max: 2 }), "{err}");
        assert!(err.to_string().contains("arm label gap"));
    }

    #[test]
    fn load_errors_are_distinct() {
        let s = CsvSchema::default();
        let missing = load_csv(write_tmp("y,x1\n1,2\n").path(), &s).unwrap_err();
        assert!(matches!(missing, Error::MissingColumn(ref c) if c == "t"));
        let nonfinite = load_csv(write_tmp("y,t,x1\ninf,0,2\n").path(), &s).unwrap_err();
        assert!(matches!(nonfinite, Error::NonFinite { .. }));
        let nan = load_csv(write_tmp("y,t,x1\n1,0,NaN\n").path(), &s).unwrap_err();
        assert!(matches!(nan, Error::NonFinite { .. }));
        let empty = load_csv(write_tmp("y,t,x1\n").path(), &s).unwrap_err();
        assert!(matches!(empty, Error::Empty(_)));
        let xgap = load_csv(write_tmp("y,t,x1,x3\n1,0,1,1\n").path(), &s).unwrap_err();
        assert!(matches!(xgap, Error::MissingColumn(ref c) if c == "x2"));
    }

    #[test]
    fn constant_p_column_becomes_arm_propensities() {
        let f = write_tmp("y,t,x1,p\n1,0,0,0.25\n2,1,0,0.75\n3,1,1,0.75\n");
        let data = load_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(data.arm_propensities(), &[0.25, 0.75]);
        assert!(data.row_propensities().is_none());

        let bad = write_tmp("y,t,x1,p\n1,0,0,0.25\n2,1,0,0.5\n");
        assert!(matches!(load_csv(bad.path(), &CsvSchema::default()), Err(Error::PropensitySum(_))));

        let varying = write_tmp("y,t,x1,p\n1,0,0,0.2\n2,0,0,0.3\n3,1,1,0.7\n");
        let data = load_csv(varying.path(), &CsvSchema::default()).unwrap();
        assert_eq!(data.row_propensities().unwrap(), &[0.2, 0.3, 0.7]);
        assert_eq!(data.propensity(1), 0.3);
    }

    #[test]
    fn uniform_arms_give_near_uniform_shares() {
        use rand::Rng;
        let mut rng = rng::rng_from_seed(3);
        let k1 = 10;
        let arms: Vec<usize> = (0..20_000).map(|_| rng.random_range(0..k1)).collect();
        let data = toy(arms);
        for &p in data.arm_propensities() {
            assert!((p - 0.1).abs() < 0.01);
        }
        let sum: f64 = data.arm_propensities().iter().sum();
        assert!((sum - 1.0).abs() < PROPENSITY_SUM_TOL);
    }

    #[test]
    fn full_fraction_returns_every_index() {
        let data = toy(vec![0, 1, 0, 1, 1]);
        let spec = SubsampleSpec { fraction: 1.0, stratify_by_arm: true, seed: 1 };
        assert_eq!(stratified_subsample(&data, &spec).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn halving_equal_arms() {
        let data = toy([vec![0; 10], vec![1; 10]].concat());
        let spec = SubsampleSpec { fraction: 0.5, stratify_by_arm: true, seed: 9 };
        let idx = stratified_subsample(&data, &spec).unwrap();
        assert_eq!(idx.iter().filter(|&&i| i < 10).count(), 5);
        assert_eq!(idx.iter().filter(|&&i| i >= 10).count(), 5);
    }

    #[test]
    fn uneven_arms_follow_the_ceiling_rule() {
        // Enumerate per-arm counts c with c_k = ceil(beta * N_k) and
        // |c_k - beta * N_k| <= 1: only (4, 2) qualifies for (7, 3).
        let beta = 0.5;
        let sizes = [7usize, 3];
        let admissible: Vec<(usize, usize)> = (0..=7)
            .flat_map(|a| (0..=3).map(move |b| (a, b)))
            .filter(|&(a, b)| {
                let ok = |c: usize, n: usize| {
                    let t = beta * n as f64;
                    c as f64 >= t && (c as f64 - t) < 1.0
                };
                ok(a, sizes[0]) && ok(b, sizes[1])
            })
            .collect();
        assert_eq!(admissible, vec![(4, 2)]);

        let data = toy([vec![0; 7], vec![1; 3]].concat());
        for seed in 0..20 {
            let spec = SubsampleSpec { fraction: beta, stratify_by_arm: true, seed };
            let idx = stratified_subsample(&data, &spec).unwrap();
            let c0 = idx.iter().filter(|&&i| i < 7).count();
            assert_eq!((c0, idx.len() - c0), admissible[0]);
        }
    }

    #[test]
    fn fraction_out_of_range_is_an_error() {
        let data = toy(vec![0, 1]);
        for f in [0.0, -0.1, 1.5, f64::NAN] {
            let spec = SubsampleSpec { fraction: f, stratify_by_arm: true, seed: 0 };
            assert!(stratified_subsample(&data, &spec).is_err());
        }
    }

    #[test]
    fn ceil_fraction_ignores_representation_error() {
        assert_eq!(ceil_fraction(0.1, 30), 3);
        assert_eq!(ceil_fraction(0.5, 7), 4);
        assert_eq!(ceil_fraction(0.3, 10), 3);
        assert_eq!(ceil_fraction(0.31, 10), 4);
    }

    #[test]
    fn sd_examples() {
        let c = Dataset::new(vec![3.0; 5], vec![0; 5], vec![0.0; 5], 1, None).unwrap();
        assert_eq!(sd_outcome(&c).unwrap(), 0.0);
        let two = Dataset::new(vec![0.0, 2.0], vec![0, 0], vec![0.0, 0.0], 1, None).unwrap();
        assert!((sd_outcome(&two).unwrap() - 1.0).abs() < 1e-15);
        let one = Dataset::new(vec![1.0], vec![0], vec![0.0], 1, None).unwrap();
        assert!(matches!(sd_outcome(&one), Err(Error::TooFewRows { .. })));
    }

    fn two_pass_sd(ys: &[f64]) -> f64 {
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    proptest! {
        #[test]
        fn sd_matches_two_pass(ys in prop::collection::vec(-1e3f64..1e3, 2..200)) {
            let n = ys.len();
            let data = Dataset::new(ys.clone(), vec![0; n], vec![0.0; n], 1, None).unwrap();
            let got = sd_outcome(&data).unwrap();
            prop_assert!((got - two_pass_sd(&ys)).abs() <= 1e-9 * (1.0 + got));
        }

        #[test]
        fn stratified_counts_within_one(
            counts in prop::collection::vec(1usize..40, 1..6),
            beta in 0.05f64..1.0,
            seed in any::<u64>(),
        ) {
            let arms: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &c)| vec![k; c]).collect();
            let data = toy(arms);
            let spec = SubsampleSpec { fraction: beta, stratify_by_arm: true, seed };
            let idx = stratified_subsample(&data, &spec).unwrap();
            prop_assert_eq!(&idx, &stratified_subsample(&data, &spec).unwrap());
            let mut per_arm = vec![0usize; counts.len()];
            for &i in &idx { per_arm[data.arms()[i]] += 1; }
            for (k, &c) in counts.iter().enumerate() {
                prop_assert!((per_arm[k] as f64 - beta * c as f64).abs() <= 1.0);
            }
            let total = ceil_fraction(beta, data.n());
            prop_assert!(idx.len() >= total && idx.len() <= total + counts.len());
        }
    }
}
