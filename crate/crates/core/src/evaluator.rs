//! Imputation metrics, entropic optimal transport between samples, and
//! k-fold evaluation of generators.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{Dataset, FeatureDomain, Mask};
use crate::error::{Error, Result};
use crate::measure::Support;
use crate::rng;
use crate::sampler::{self, Ordering};
use crate::trainer::{train, TrainConfig};

fn check_shapes(imputed: &Dataset, truth: &Dataset, mask: &Mask) -> Result<()> {
    if imputed.schema() != truth.schema() {
        return Err(Error::SchemaMismatch("imputed and truth schemas differ".into()));
    }
    if (imputed.m(), imputed.d()) != (truth.m(), truth.d()) || mask.shape() != (truth.m(), truth.d()) {
        return Err(Error::SchemaMismatch("imputed, truth and mask shapes differ".into()));
    }
    Ok(())
}

/// Fraction of masked categorical cells imputed wrongly; `None` when no
/// categorical cell is masked.
pub fn perr(imputed: &Dataset, truth: &Dataset, mask: &Mask) -> Result<Option<f64>> {
    check_shapes(imputed, truth, mask)?;
    let (mut n, mut wrong) = (0usize, 0usize);
    for f in 0..truth.d() {
        if !matches!(truth.schema().domain(f), FeatureDomain::Categorical { .. }) {
            continue;
        }
        for i in 0..truth.m() {
            if mask.get(i, f) {
                n += 1;
                if imputed.row(i)[f] != truth.row(i)[f] {
                    wrong += 1;
                }
            }
        }
    }
    Ok((n > 0).then(|| wrong as f64 / n as f64))
}

/// Root mean squared error over masked numeric cells; `None` when no
/// numeric cell is masked.
pub fn rmse(imputed: &Dataset, truth: &Dataset, mask: &Mask) -> Result<Option<f64>> {
    check_shapes(imputed, truth, mask)?;
    let (mut n, mut sum) = (0usize, 0.0);
    for f in 0..truth.d() {
        if !truth.schema().domain(f).is_numeric() {
            continue;
        }
        for i in 0..truth.m() {
            if mask.get(i, f) {
                let (Some(a), Some(b)) = (imputed.row(i)[f], truth.row(i)[f]) else {
                    return Err(Error::InvalidArgument(format!("masked cell ({i}, {f}) is missing")));
                };
                n += 1;
                sum += (a - b).powi(2);
            }
        }
    }
    Ok((n > 0).then(|| (sum / n as f64).sqrt()))
}

/// Per-feature mean and standard deviation used to standardise numeric
/// features in the ground cost.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let d = ds.d();
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for f in 0..d {
            let col: Vec<f64> = ds.rows().iter().filter_map(|r| r[f]).collect();
            if col.is_empty() {
                continue;
            }
            let mu = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / col.len() as f64;
            mean[f] = mu;
            std[f] = var.sqrt();
        }
        FeatureStats { mean, std }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundCost {
    /// Σ |x̃ - ỹ| over numeric features plus 0/1 per categorical feature.
    #[default]
    L1,
    /// Σ (x̃ - ỹ)² over numeric features plus 0/1 per categorical feature.
    SquaredL2,
}

impl std::str::FromStr for GroundCost {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(GroundCost::L1),
            "sql2" | "squared-l2" => Ok(GroundCost::SquaredL2),
            other => Err(Error::InvalidArgument(format!("unknown ground cost `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OtOptions {
    pub eps: f64,
    pub max_iter: usize,
    /// Stop when the L1 violation of the row marginal falls below this.
    pub tol: f64,
    pub cost: GroundCost,
}

impl Default for OtOptions {
    fn default() -> Self {
        OtOptions {
            eps: 0.5,
            max_iter: 10_000,
            tol: 1e-6,
            cost: GroundCost::L1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OtResult {
    /// ⟨P, C⟩ for the entropic plan P.
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn ground_cost(a: &[Option<f64>], b: &[Option<f64>], numeric: &[bool], stats: &FeatureStats, kind: GroundCost) -> f64 {
    let mut c = 0.0;
    for f in 0..a.len() {
        let (Some(x), Some(y)) = (a[f], b[f]) else { continue };
        if numeric[f] {
            if stats.std[f] <= 0.0 {
                continue;
            }
            let d = (x - y) / stats.std[f];
            c += match kind {
                GroundCost::L1 => d.abs(),
                GroundCost::SquaredL2 => d * d,
            };
        } else if x != y {
            c += 1.0;
        }
    }
    c
}

fn logsumexp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropic OT cost between the empirical distributions of `a` and `b`.
/// The computation is done in a canonical argument order, so the result is
/// exactly symmetric.
pub fn sinkhorn_ot(a: &Dataset, b: &Dataset, stats: &FeatureStats, opts: &OtOptions) -> Result<OtResult> {
    if a.schema() != b.schema() {
        return Err(Error::SchemaMismatch("OT between datasets with different schemas".into()));
    }
    if opts.eps <= 0.0 {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    if a.m() == 0 || b.m() == 0 {
        return Err(Error::EmptyDataset);
    }
    let key = |d: &Dataset| (d.m(), d.content_hash());
    let (a, b) = if key(a) <= key(b) { (a, b) } else { (b, a) };
    let numeric: Vec<bool> = (0..a.d()).map(|f| a.schema().domain(f).is_numeric()).collect();
    let (n, m) = (a.m(), b.m());
    let cost: Vec<f64> = (0..n * m)
        .map(|k| ground_cost(a.row(k / m), b.row(k % m), &numeric, stats, opts.cost))
        .collect();
    let eps = opts.eps;
    let (log_a, log_b) = (-(n as f64).ln(), -(m as f64).ln());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        for i in 0..n {
            let row = &cost[i * m..(i + 1) * m];
            f[i] = eps * log_a - eps * logsumexp((0..m).map(|j| (g[j] - row[j]) / eps));
        }
        for j in 0..m {
            g[j] = eps * log_b - eps * logsumexp((0..n).map(|i| (f[i] - cost[i * m + j]) / eps));
        }
        // Columns are exact after the g update; check the rows.
        let violation: f64 = (0..n)
            .map(|i| {
                let s: f64 = (0..m).map(|j| ((f[i] + g[j] - cost[i * m + j]) / eps).exp()).sum();
                (s - 1.0 / n as f64).abs()
            })
            .sum();
        if violation < opts.tol {
            converged = true;
            break;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let c = cost[i * m + j];
            total += ((f[i] + g[j] - c) / eps).exp() * c;
        }
    }
    Ok(OtResult {
        cost: total,
        converged,
        iterations,
    })
}

/// What plays the generator in a lifelike run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    /// A generative forest trained on the training folds.
    #[default]
    Gf,
    /// Uniform draws over the domain.
    Uniform,
    /// Training rows, sampled without replacement.
    Copy,
}

impl std::str::FromStr for Generator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gf" => Ok(Generator::Gf),
            "uniform" => Ok(Generator::Uniform),
            "copy" => Ok(Generator::Copy),
            other => Err(Error::InvalidArgument(format!("unknown generator `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub cost: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LifelikeReport {
    pub generator: Generator,
    pub folds: Vec<FoldResult>,
    pub mean: f64,
    /// Sample standard deviation over folds.
    pub std: f64,
}

impl LifelikeReport {
    pub fn costs(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.cost).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["fold", "n_train", "n_test", "cost", "warning"])?;
        for f in &self.folds {
            w.write_record([
                f.fold.to_string(),
                f.n_train.to_string(),
                f.n_test.to_string(),
                format!("{:?}", f.cost),
                if f.converged { String::new() } else { "not converged".into() },
            ])?;
        }
        w.write_record(["mean", "", "", &format!("{:?}", self.mean), ""])?;
        w.write_record(["std", "", "", &format!("{:?}", self.std), ""])?;
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialisation")
    }
}

/// Fold index of every row. Stratified on the last categorical feature when
/// there is one: each class is shuffled and dealt round-robin.
pub fn fold_assignment(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidArgument("k-fold needs k >= 2".into()));
    }
    if ds.m() < k {
        return Err(Error::InvalidArgument(format!("{} rows cannot fill {k} folds", ds.m())));
    }
    let strat = (0..ds.d())
        .rev()
        .find(|&f| matches!(ds.schema().domain(f), FeatureDomain::Categorical { .. }));
    let mut groups: std::collections::BTreeMap<i64, Vec<usize>> = std::collections::BTreeMap::new();
    for i in 0..ds.m() {
        let key = strat.map_or(0, |f| ds.row(i)[f].map_or(-1, |v| v as i64));
        groups.entry(key).or_default().push(i);
    }
    let mut rng = rng::substream(seed, 0xF01D, 0);
    let mut fold = vec![0; ds.m()];
    let mut next = 0;
    for rows in groups.values_mut() {
        rows.shuffle(&mut rng);
        for &i in rows.iter() {
            fold[i] = next % k;
            next += 1;
        }
    }
    Ok(fold)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Train on k-1 folds, generate as many rows as the held-out fold, and score
/// the OT cost against it. Folds run in parallel.
pub fn kfold_lifelike(
    ds: &Dataset,
    k: usize,
    cfg: &TrainConfig,
    generator: Generator,
    opts: &OtOptions,
    seed: u64,
) -> Result<LifelikeReport> {
    let fold = fold_assignment(ds, k, seed)?;
    let stats = FeatureStats::from_dataset(ds);
    let folds: Result<Vec<FoldResult>> = (0..k)
        .into_par_iter()
        .map(|i| {
            let test_idx: Vec<usize> = (0..ds.m()).filter(|&r| fold[r] == i).collect();
            let train_idx: Vec<usize> = (0..ds.m()).filter(|&r| fold[r] != i).collect();
            let test = ds.subset(&test_idx);
            let train_ds = ds.subset(&train_idx);
            let n = test.m();
            let gen_seed = seed.wrapping_add(1 + i as u64);
            let generated = match generator {
                Generator::Gf => {
                    let mut c = cfg.clone();
                    c.seed = gen_seed;
                    let (forest, _) = train(train_ds.clone(), &c)?;
                    sampler::generate(&forest, n, gen_seed, Ordering::Iterative)?
                }
                Generator::Uniform => {
                    let full = Support::full(ds.schema());
                    let rows = (0..n)
                        .map(|j| {
                            let mut r = rng::stream(gen_seed, j as u64);
                            sampler::draw_uniform(&full, &mut r).into_iter().map(Some).collect()
                        })
                        .collect();
                    Dataset::new_unchecked(ds.schema().clone(), rows)?
                }
                Generator::Copy => {
                    let mut idx: Vec<usize> = (0..train_ds.m()).collect();
                    idx.shuffle(&mut rng::stream(gen_seed, 0));
                    idx.truncate(n);
                    train_ds.subset(&idx)
                }
            };
            let ot = sinkhorn_ot(&generated, &test, &stats, opts)?;
            Ok(FoldResult {
                fold: i,
                n_train: train_ds.m(),
                n_test: n,
                cost: ot.cost,
                converged: ot.converged,
            })
        })
        .collect();
    let folds = folds?;
    let (mean, std) = mean_std(&folds.iter().map(|f| f.cost).collect::<Vec<_>>());
    Ok(LifelikeReport {
        generator,
        folds,
        mean,
        std,
    })
}

/// Welch's two-sample t-test. Returns the statistic and the two-sided
/// p-value.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("t-test needs two values per sample".into()));
    }
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let (va, vb) = (sa * sa / a.len() as f64, sb * sb / b.len() as f64);
    let se = (va + vb).sqrt();
    if se == 0.0 {
        return Ok(if ma == mb { (0.0, 1.0) } else { (f64::INFINITY.copysign(ma - mb), 0.0) });
    }
    let t = (ma - mb) / se;
    let df = (va + vb).powi(2) / (va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((t, 2.0 * (1.0 - dist.cdf(t.abs()))))
}
