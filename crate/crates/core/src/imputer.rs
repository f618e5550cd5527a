//! Missing-data imputation.
//!
//! Given a partially observed row, every leaf tuple whose support is
//! consistent with the observed values is enumerated. The tuple of maximal
//! model density wins (ties broken at random) and the missing features are
//! drawn uniformly inside it.

use rand::Rng;
use rayon::prelude::*;

use crate::data::{Dataset, FeatureDomain};
use crate::error::{Error, Result};
use crate::forest::{GenerativeForest, NodeId, Tree};
use crate::measure::{self, Support};
use crate::rng;
use crate::rowset::RowSet;
use crate::sampler;

/// A leaf tuple consistent with the observed part of a row.
#[derive(Clone, Debug, PartialEq)]
pub struct Tuple {
    pub leaves: Vec<NodeId>,
    /// Full support of the tuple; observed features keep the restriction
    /// that contains their value.
    pub support: Support,
    /// Model probability of the support. In GF mode rows with missing
    /// values count by their spread share.
    pub mass: f64,
}

impl Tuple {
    /// Density ranking key: zero-length dimensions first, then mass per
    /// unit volume of the remaining dimensions.
    pub fn density_key(&self) -> (usize, f64) {
        let points = self
            .support
            .parts()
            .iter()
            .filter(|r| matches!(r, measure::Restriction::Interval { lo, hi, .. } if lo == hi))
            .count();
        let (vol, _) = measure::volume(&self.support);
        let density = if self.mass <= 0.0 {
            0.0
        } else if vol > 0.0 {
            self.mass / vol
        } else {
            f64::INFINITY
        };
        (if self.mass > 0.0 { points } else { 0 }, density)
    }
}

fn check_observed(forest: &GenerativeForest, x: &[Option<f64>]) -> Result<()> {
    let schema = forest.schema();
    if x.len() != schema.len() {
        return Err(Error::SchemaMismatch(format!(
            "row has {} values, schema has {}",
            x.len(),
            schema.len()
        )));
    }
    for (f, v) in x.iter().enumerate() {
        if let Some(v) = v {
            if !schema.domain(f).contains(*v) {
                return Err(Error::OutOfDomain {
                    feature: schema.feature(f).name.clone(),
                    value: v.to_string(),
                });
            }
        }
    }
    Ok(())
}

/// Every leaf tuple consistent with the observed values of `x`.
pub fn conditional_tuples(forest: &GenerativeForest, x: &[Option<f64>]) -> Result<Vec<Tuple>> {
    check_observed(forest, x)?;
    let mut out = Vec::new();
    let rows = forest.training_rows().map(RowSet::full);
    let mut leaves = Vec::with_capacity(forest.trees().len());
    descend(forest, x, 0, Tree::ROOT, Support::full(forest.schema()), rows, &mut leaves, &mut out);
    assert!(!out.is_empty(), "no leaf tuple is consistent with an in-domain row");
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn descend(
    forest: &GenerativeForest,
    x: &[Option<f64>],
    t: usize,
    node: NodeId,
    support: Support,
    rows: Option<RowSet>,
    leaves: &mut Vec<NodeId>,
    out: &mut Vec<Tuple>,
) {
    let tree = forest.tree(t);
    if let Some((l, r)) = tree.children(node) {
        let split = tree.split_of(node).expect("internal node");
        let children: &[NodeId] = match x[split.feature()] {
            Some(v) if split.goes_right(v) => &[r],
            Some(_) => &[l],
            None => &[l, r],
        };
        for &c in children {
            if let Some(s) = support.intersect_unchecked(&tree.node(c).support) {
                descend(forest, x, t, c, s, rows.clone(), leaves, out);
            }
        }
        return;
    }
    let rows = rows.map(|mut rs| {
        rs.intersect_with(forest.node_rows(t, node).expect("bound"));
        rs
    });
    leaves.push(node);
    if t + 1 == forest.trees().len() {
        let mass = match &rows {
            Some(rs) => forest.spread_count(rs, &support) / forest.training_rows().expect("bound") as f64,
            None => sampler::sequence_probability(forest, leaves),
        };
        out.push(Tuple {
            leaves: leaves.clone(),
            support,
            mass,
        });
    } else {
        descend(forest, x, t + 1, Tree::ROOT, support, rows, leaves, out);
    }
    leaves.pop();
}

/// Indices of the tuples of maximal density; keys within 1e-12 relative are
/// tied.
pub fn best_tuples(tuples: &[Tuple]) -> Vec<usize> {
    let keys: Vec<(usize, f64)> = tuples.iter().map(Tuple::density_key).collect();
    let best = keys
        .iter()
        .copied()
        .fold((0usize, f64::NEG_INFINITY), |a, k| if k.0 > a.0 || (k.0 == a.0 && k.1 > a.1) { k } else { a });
    keys.iter()
        .enumerate()
        .filter(|(_, k)| {
            k.0 == best.0 && (k.1 == best.1 || (best.1.is_finite() && (best.1 - k.1).abs() <= 1e-12 * best.1.abs()))
        })
        .map(|(i, _)| i)
        .collect()
}

/// Fill the missing values of `x`. Observed values are passed through.
pub fn impute<R: Rng + ?Sized>(forest: &GenerativeForest, x: &[Option<f64>], rng: &mut R) -> Result<Vec<f64>> {
    if x.iter().all(Option::is_some) {
        check_observed(forest, x)?;
        return Ok(x.iter().map(|v| v.expect("observed")).collect());
    }
    let tuples = conditional_tuples(forest, x)?;
    let best = best_tuples(&tuples);
    let pick = if best.len() == 1 { best[0] } else { best[rng.random_range(0..best.len())] };
    let support = &tuples[pick].support;
    Ok(x.iter()
        .enumerate()
        .map(|(f, v)| v.unwrap_or_else(|| sampler::draw_restriction(support.part(f), rng)))
        .collect())
}

/// Impute every row of `ds`. Row `i` uses stream `i`; complete rows are
/// returned untouched.
pub fn impute_dataset(forest: &GenerativeForest, ds: &Dataset, seed: u64) -> Result<Dataset> {
    if ds.schema() != forest.schema() {
        return Err(Error::SchemaMismatch("dataset schema differs from the model schema".into()));
    }
    let rows: Result<Vec<Vec<Option<f64>>>> = ds
        .rows()
        .par_iter()
        .enumerate()
        .map(|(i, row)| {
            if row.iter().all(Option::is_some) {
                return Ok(row.clone());
            }
            let mut rng = rng::stream(seed, i as u64);
            Ok(impute(forest, row, &mut rng)?.into_iter().map(Some).collect())
        })
        .collect();
    Dataset::new_unchecked(ds.schema().clone(), rows?)
}

/// How the marginal baseline fills a cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MarginalStrategy {
    /// Draw from the column's observed training values.
    #[default]
    Sample,
    /// Column mean (rounded for integers; mode for categoricals).
    Mean,
    /// Most frequent value, smallest on ties.
    Mode,
}

impl std::str::FromStr for MarginalStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(MarginalStrategy::Sample),
            "mean" => Ok(MarginalStrategy::Mean),
            "mode" => Ok(MarginalStrategy::Mode),
            other => Err(Error::InvalidArgument(format!("unknown marginal strategy `{other}`"))),
        }
    }
}

fn column_mode(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (mut best, mut best_n) = (sorted[0], 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        if j - i > best_n {
            best = sorted[i];
            best_n = j - i;
        }
        i = j;
    }
    best
}

/// Fill each missing cell of `masked` from the empirical marginal of the
/// same column in `train`.
pub fn marginal_impute(train: &Dataset, masked: &Dataset, seed: u64, strategy: MarginalStrategy) -> Result<Dataset> {
    if train.schema() != masked.schema() {
        return Err(Error::SchemaMismatch("training and masked schemas differ".into()));
    }
    let schema = masked.schema();
    let columns: Vec<Vec<f64>> = (0..schema.len())
        .map(|f| train.rows().iter().filter_map(|r| r[f]).collect())
        .collect();
    for f in 0..schema.len() {
        if columns[f].is_empty() && masked.rows().iter().any(|r| r[f].is_none()) {
            return Err(Error::EmptyColumn(schema.feature(f).name.clone()));
        }
    }
    let fixed: Vec<Option<f64>> = (0..schema.len())
        .map(|f| {
            let col = &columns[f];
            if col.is_empty() {
                return None;
            }
            match (strategy, schema.domain(f)) {
                (MarginalStrategy::Sample, _) => None,
                (MarginalStrategy::Mode, _) | (MarginalStrategy::Mean, FeatureDomain::Categorical { .. }) => {
                    Some(column_mode(col))
                }
                (MarginalStrategy::Mean, FeatureDomain::Integer { .. }) => {
                    Some((col.iter().sum::<f64>() / col.len() as f64).round())
                }
                (MarginalStrategy::Mean, FeatureDomain::Real { .. }) => Some(col.iter().sum::<f64>() / col.len() as f64),
            }
        })
        .collect();
    let rows: Vec<Vec<Option<f64>>> = masked
        .rows()
        .par_iter()
        .enumerate()
        .map(|(i, row)| {
            let mut rng = rng::stream(seed, i as u64);
            row.iter()
                .enumerate()
                .map(|(f, v)| {
                    v.or_else(|| fixed[f].or_else(|| Some(columns[f][rng.random_range(0..columns[f].len())])))
                })
                .collect()
        })
        .collect();
    Dataset::new_unchecked(schema.clone(), rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Feature, Schema};
    use crate::forest::Split;
    use crate::measure::{CatSet, Loss};
    use std::sync::Arc;

    fn unit(names: &[&str]) -> Schema {
        Schema::new(
            names
                .iter()
                .map(|n| Feature {
                    name: n.to_string(),
                    domain: FeatureDomain::Real { lo: 0.0, hi: 1.0 },
                })
                .collect(),
        )
        .unwrap()
    }

    fn data(schema: Schema, rows: &[[f64; 2]]) -> Arc<Dataset> {
        Arc::new(Dataset::new(schema, rows.iter().map(|r| vec![Some(r[0]), Some(r[1])]).collect()).unwrap())
    }

    fn stump(schema: &Schema, split: Split) -> Tree {
        let mut t = Tree::root_only(schema);
        t.split_leaf(0, split).unwrap();
        t
    }

    #[test]
    fn root_only_tuple() {
        let ds = data(unit(&["x", "y"]), &[[0.1, 0.2], [0.7, 0.9]]);
        let f = GenerativeForest::root_only(ds, 2, 0.5, Loss::Square).unwrap();
        let tuples = conditional_tuples(&f, &[Some(0.3), None]).unwrap();
        assert_eq!(tuples.len(), 1);
        assert_eq!(tuples[0].mass, 1.0);
        assert_eq!(tuples[0].support, Support::full(f.schema()));
    }

    #[test]
    fn stump_on_observed_feature() {
        let s = unit(&["x", "y"]);
        let ds = data(s.clone(), &[[0.1, 0.2], [0.7, 0.9], [0.8, 0.1]]);
        let f = GenerativeForest::new_gf(ds, vec![stump(&s, Split::le(0, 0.5))], 0.5, Loss::Square).unwrap();
        let tuples = conditional_tuples(&f, &[Some(0.6), None]).unwrap();
        assert_eq!(tuples.len(), 1);
        assert_eq!(tuples[0].leaves, vec![2]);
        assert!((tuples[0].mass - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn copied_column_is_recovered() {
        let s = unit(&["x", "y"]);
        let rows: Vec<[f64; 2]> = (0..40).map(|i| {
            let v = (i as f64 + 0.5) / 40.0;
            [v, v]
        }).collect();
        let ds = data(s.clone(), &rows);
        let mut t = Tree::root_only(&s);
        let (l, r) = t.split_leaf(0, Split::le(0, 0.5)).unwrap();
        t.split_leaf(l, Split::le(1, 0.5)).unwrap();
        t.split_leaf(r, Split::le(1, 0.5)).unwrap();
        let f = GenerativeForest::new_gf(ds, vec![t], 0.5, Loss::Square).unwrap();
        let mut rng = rng::stream(4, 0);
        for x in [0.1, 0.3, 0.7, 0.9] {
            let y = impute(&f, &[Some(x), None], &mut rng).unwrap()[1];
            assert_eq!(y > 0.5, x > 0.5, "x={x} y={y}");
        }
    }

    #[test]
    fn dominant_modality() {
        let schema = Schema::new(vec![
            Feature {
                name: "x".into(),
                domain: FeatureDomain::Real { lo: 0.0, hi: 1.0 },
            },
            Feature {
                name: "c".into(),
                domain: FeatureDomain::Categorical {
                    modalities: vec!["a".into(), "b".into(), "c".into()],
                },
            },
        ])
        .unwrap();
        let rows = vec![
            vec![Some(0.2), Some(1.0)],
            vec![Some(0.3), Some(1.0)],
            vec![Some(0.4), Some(1.0)],
            vec![Some(0.1), Some(0.0)],
            vec![Some(0.8), Some(2.0)],
            vec![Some(0.9), Some(0.0)],
        ];
        let ds = Arc::new(Dataset::new(schema.clone(), rows).unwrap());
        let mut t = Tree::root_only(&schema);
        let (l, _) = t.split_leaf(0, Split::le(0, 0.5)).unwrap();
        t.split_leaf(
            l,
            Split::Subset {
                feature: 1,
                right: CatSet::from_indices(3, [1]),
            },
        )
        .unwrap();
        let f = GenerativeForest::new_gf(ds, vec![t], 0.5, Loss::Square).unwrap();
        let mut rng = rng::stream(0, 0);
        for _ in 0..20 {
            assert_eq!(impute(&f, &[Some(0.25), None], &mut rng).unwrap()[1], 1.0);
        }
    }

    #[test]
    fn complete_rows_pass_through() {
        let s = unit(&["x", "y"]);
        let ds = data(s.clone(), &[[0.1, 0.2], [0.7, 0.9]]);
        let f = GenerativeForest::root_only(ds.clone(), 1, 0.5, Loss::Square).unwrap();
        let mut rng = rng::stream(0, 0);
        assert_eq!(impute(&f, &[Some(0.3), Some(0.4)], &mut rng).unwrap(), vec![0.3, 0.4]);
        assert_eq!(impute_dataset(&f, &ds, 1).unwrap(), *ds);
        assert!(impute(&f, &[Some(3.0), None], &mut rng).is_err());
    }

    #[test]
    fn marginal_baselines() {
        let s = unit(&["x", "y"]);
        let train = data(s.clone(), &[[0.5, 0.1], [0.5, 0.3], [0.5, 0.5], [0.5, 0.7]]);
        let masked = Dataset::new(s, (0..2000).map(|_| vec![None, None]).collect()).unwrap();
        let a = marginal_impute(&train, &masked, 3, MarginalStrategy::Sample).unwrap();
        assert!(a.rows().iter().all(|r| r[0] == Some(0.5)));
        let mean = a.rows().iter().map(|r| r[1].unwrap()).sum::<f64>() / 2000.0;
        let sd = (0.05f64 / 2000.0).sqrt();
        assert!((mean - 0.4).abs() < 3.0 * sd, "{mean}");
        assert_eq!(a, marginal_impute(&train, &masked, 3, MarginalStrategy::Sample).unwrap());
        let m = marginal_impute(&train, &masked, 3, MarginalStrategy::Mean).unwrap();
        assert!((m.row(0)[1].unwrap() - 0.4).abs() < 1e-12);
        let empty = Dataset::new(train.schema().clone(), vec![vec![None, Some(0.1)]]).unwrap();
        assert!(marginal_impute(&empty, &masked, 0, MarginalStrategy::Sample).is_err());
    }
}
