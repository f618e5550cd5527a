//! Greedy top-down induction of generative forests.
//!
//! Training starts from `T` root-only trees and performs `J` iterations.
//! Each iteration picks the heaviest splittable leaf over all trees, finds the
//! split minimising the expected Bayes risk of the real-vs-uniform task over
//! the cross-tree partition, and applies it. Only partition elements inside
//! the chosen leaf are affected, so both scoring and application are local.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::data::{Dataset, FeatureDomain};
use crate::error::{Error, Result};
use crate::forest::{GenerativeForest, Mode, NodeId, Split, Tree};
use crate::measure::{self, CatSet, Loss, Restriction, Support};
use crate::rng;
use crate::rowset::RowSet;
use crate::sampler::corrected_probability;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Total number of splits J.
    pub splits: usize,
    /// Number of trees T.
    pub trees: usize,
    pub loss: Loss,
    pub prior: f64,
    pub mode: Mode,
    /// Categorical features with at most this many modalities in a leaf get
    /// an exhaustive partition search.
    pub cat_cutoff: usize,
    /// Random partitions tried above the cutoff.
    pub cat_samples: usize,
    pub seed: u64,
    /// Each child of a split must hold at least this many training rows.
    pub min_leaf_rows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            splits: 0,
            trees: 1,
            loss: Loss::Square,
            prior: 0.5,
            mode: Mode::Gf,
            cat_cutoff: 22,
            cat_samples: 1024,
            seed: 0,
            min_leaf_rows: 1,
        }
    }
}

impl TrainConfig {
    pub fn new(trees: usize, splits: usize) -> Self {
        TrainConfig {
            trees,
            splits,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trees == 0 {
            return Err(Error::InvalidArgument("at least one tree is required".into()));
        }
        if self.cat_cutoff < 2 {
            return Err(Error::InvalidArgument("categorical cutoff must be at least 2".into()));
        }
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(Error::InvalidArgument(format!("prior {} outside (0, 1)", self.prior)));
        }
        if self.cat_samples == 0 {
            return Err(Error::InvalidArgument("categorical sample size must be positive".into()));
        }
        if self.min_leaf_rows == 0 {
            return Err(Error::InvalidArgument("minimum leaf rows must be positive".into()));
        }
        Ok(())
    }
}

/// Per-split record of the quantities in the weak learning assumption.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WlaWitness {
    /// |p_R[right | leaf] - p_U[right | leaf]|.
    pub gamma: f64,
    /// π p_R[leaf] / p_M[leaf].
    pub kappa_hat: f64,
    /// p_M[leaf].
    pub leaf_mass_m: f64,
    /// 1 / number of leaves of the tree before the split.
    pub leaf_bound: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainStep {
    pub iteration: usize,
    pub tree: usize,
    pub leaf: NodeId,
    pub split: Split,
    pub poprisk: f64,
    pub witness: WlaWitness,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainHistory {
    pub initial_poprisk: f64,
    pub steps: Vec<TrainStep>,
    /// Set when no leaf admitted a split before `J` iterations.
    pub stopped_early: bool,
}

impl TrainHistory {
    /// Initial risk followed by the risk after every split.
    pub fn poprisks(&self) -> Vec<f64> {
        std::iter::once(self.initial_poprisk)
            .chain(self.steps.iter().map(|s| s.poprisk))
            .collect()
    }

    pub fn final_poprisk(&self) -> f64 {
        self.steps.last().map_or(self.initial_poprisk, |s| s.poprisk)
    }

    pub fn write_csv<W: Write>(&self, writer: W, schema: &crate::data::Schema) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "iteration",
            "tree",
            "leaf",
            "feature",
            "split",
            "poprisk",
            "gamma",
            "kappa",
            "leaf_mass",
            "leaf_bound",
        ])?;
        for s in &self.steps {
            w.write_record([
                s.iteration.to_string(),
                s.tree.to_string(),
                s.leaf.to_string(),
                schema.feature(s.split.feature()).name.clone(),
                s.split.value_label(schema),
                format!("{:?}", s.poprisk),
                format!("{:?}", s.witness.gamma),
                format!("{:?}", s.witness.kappa_hat),
                format!("{:?}", s.witness.leaf_mass_m),
                format!("{:?}", s.witness.leaf_bound),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One element of the running partition.
#[derive(Clone, Debug)]
struct Cell {
    leaves: Vec<NodeId>,
    support: Support,
    rows: RowSet,
    /// p_R[C] in GF mode, its chained estimate in EOGT mode.
    mass: f64,
    /// p_U[C].
    umass: f64,
}

/// Best candidate for one feature.
#[derive(Clone, Debug)]
struct Candidate {
    split: Split,
    delta: f64,
}

/// Incremental training state.
pub struct Trainer {
    data: Arc<Dataset>,
    cfg: TrainConfig,
    trees: Vec<Tree>,
    node_rows: Vec<Vec<RowSet>>,
    cells: Vec<Cell>,
    iterations: usize,
    has_missing: bool,
}

impl Trainer {
    pub fn new(data: impl Into<Arc<Dataset>>, cfg: TrainConfig) -> Result<Self> {
        let data = data.into();
        cfg.validate()?;
        if data.m() == 0 {
            return Err(Error::EmptyDataset);
        }
        let m = data.m();
        let mut trees: Vec<Tree> = (0..cfg.trees).map(|_| Tree::root_only(data.schema())).collect();
        for t in &mut trees {
            t.set_counts(&[m]);
        }
        let node_rows = vec![vec![RowSet::full(m)]; cfg.trees];
        let has_missing = data.missing_count() > 0;
        let cells = vec![Cell {
            leaves: vec![Tree::ROOT; cfg.trees],
            support: Support::full(data.schema()),
            rows: RowSet::full(m),
            mass: 1.0,
            umass: 1.0,
        }];
        Ok(Trainer {
            data,
            cfg,
            trees,
            node_rows,
            cells,
            iterations: 0,
            has_missing,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn partition_size(&self) -> usize {
        self.cells.len()
    }

    fn m(&self) -> f64 {
        self.data.m() as f64
    }

    fn risk(&self, p_r: f64, p_u: f64) -> f64 {
        self.cfg.loss.cell_risk(self.cfg.prior, p_r, p_u)
    }

    /// Expected Bayes risk over the current partition.
    pub fn poprisk(&self) -> f64 {
        self.cells.iter().map(|c| self.risk(c.mass, c.umass)).sum()
    }

    /// Empirical mass of a leaf.
    pub fn leaf_mass(&self, t: usize, leaf: NodeId) -> f64 {
        self.trees[t].node(leaf).count as f64 / self.m()
    }

    /// All leaves, heaviest first; ties by tree index then leaf id.
    pub fn leaf_order(&self) -> Vec<(usize, NodeId)> {
        let mut leaves: Vec<(usize, NodeId)> = self
            .trees
            .iter()
            .enumerate()
            .flat_map(|(t, tree)| tree.leaves().map(move |l| (t, l)))
            .collect();
        leaves.sort_by(|a, b| {
            let ca = self.trees[a.0].node(a.1).count;
            let cb = self.trees[b.0].node(b.1).count;
            cb.cmp(&ca).then(a.cmp(b))
        });
        leaves
    }

    /// Heaviest leaf that admits a split, with its best split.
    pub fn pick_tree_and_leaf(&self) -> Option<(usize, NodeId, Split)> {
        self.leaf_order()
            .into_iter()
            .find_map(|(t, l)| self.split_pred(t, l).map(|s| (t, l, s)))
    }

    fn affected(&self, t: usize, leaf: NodeId) -> Vec<usize> {
        (0..self.cells.len()).filter(|&i| self.cells[i].leaves[t] == leaf).collect()
    }

    /// Best split of a leaf, or `None` when no candidate passes the guards.
    pub fn split_pred(&self, t: usize, leaf: NodeId) -> Option<Split> {
        self.best_split(t, leaf).map(|c| c.split)
    }

    /// Best split of a leaf together with its risk change.
    pub fn scored_split(&self, t: usize, leaf: NodeId) -> Option<(Split, f64)> {
        self.best_split(t, leaf).map(|c| (c.split, c.delta))
    }

    /// Whether `split` passes the guards of the candidate search at `leaf`:
    /// both children hold enough rows and no affected cell is cut into a
    /// zero-length piece.
    pub fn admissible(&self, t: usize, leaf: NodeId, split: &Split) -> bool {
        let node = self.trees[t].node(leaf);
        if !node.is_leaf() {
            return false;
        }
        let f = split.feature();
        let part = node.support.part(f);
        if split.restrict(part, false).is_empty() || split.restrict(part, true).is_empty() {
            return false;
        }
        let (l, r) = self.child_rows(t, leaf, split);
        if l.count() < self.cfg.min_leaf_rows || r.count() < self.cfg.min_leaf_rows {
            return false;
        }
        self.affected(t, leaf).into_iter().all(|ci| {
            let r = self.cells[ci].support.part(f);
            let (a, b) = (split.restrict(r, false), split.restrict(r, true));
            a.is_empty() || b.is_empty() || !(is_point(&a) || is_point(&b))
        })
    }

    /// The forest as it stands, bound to the training data.
    pub fn snapshot(&self) -> Result<GenerativeForest> {
        GenerativeForest::new_gf(self.data.clone(), self.trees.clone(), self.cfg.prior, self.cfg.loss)
    }

    fn best_split(&self, t: usize, leaf: NodeId) -> Option<Candidate> {
        if !self.trees[t].node(leaf).is_leaf() {
            return None;
        }
        let affected = self.affected(t, leaf);
        let per_feature: Vec<Option<Candidate>> = (0..self.data.d())
            .into_par_iter()
            .map(|f| match self.data.schema().domain(f) {
                FeatureDomain::Categorical { .. } => self.best_subset(t, leaf, f, &affected),
                _ => self.best_threshold(t, leaf, f, &affected),
            })
            .collect();
        let mut best: Option<Candidate> = None;
        for c in per_feature.into_iter().flatten() {
            if best.as_ref().is_none_or(|b| c.delta < b.delta) {
                best = Some(c);
            }
        }
        best
    }

    /// Spread mass of `rows` inside `s`; missing values are spread uniformly
    /// so that thin cuts gain nothing from rows that never reported the
    /// feature.
    fn mass_of(&self, rows: &RowSet, s: &Support) -> f64 {
        if !self.has_missing {
            return rows.count() as f64 / self.m();
        }
        let schema = self.data.schema();
        rows.iter().map(|r| measure::spread_weight(schema, self.data.row(r), s)).sum::<f64>() / self.m()
    }

    /// Observed values of `f` in a cell with their spread weights, sorted,
    /// and the total weight of rows missing `f`.
    fn cell_column(&self, cell: &Cell, f: usize) -> (Vec<(f64, f64)>, f64) {
        let schema = self.data.schema();
        let mut vals = Vec::new();
        let mut miss = 0.0;
        for r in cell.rows.iter() {
            let row = self.data.row(r);
            let w = if self.has_missing { measure::spread_weight(schema, row, &cell.support) } else { 1.0 };
            match row[f] {
                Some(v) => vals.push((v, w)),
                None => miss += w,
            }
        }
        vals.sort_by(|a, b| a.0.total_cmp(&b.0));
        (vals, miss)
    }

    /// Sorted observed values of `f` over `rows`, and the missing count.
    fn column_values(&self, rows: &RowSet, f: usize) -> (Vec<f64>, usize) {
        let mut vals = Vec::new();
        let mut miss = 0;
        for r in rows.iter() {
            match self.data.row(r)[f] {
                Some(v) => vals.push(v),
                None => miss += 1,
            }
        }
        vals.sort_by(f64::total_cmp);
        (vals, miss)
    }

    fn best_threshold(&self, t: usize, leaf: NodeId, f: usize, affected: &[usize]) -> Option<Candidate> {
        let (leaf_vals, leaf_miss) = self.column_values(&self.node_rows[t][leaf], f);
        let mut distinct = leaf_vals.clone();
        distinct.dedup();
        if distinct.len() < 2 {
            return None;
        }
        let integer = matches!(self.data.schema().domain(f), FeatureDomain::Integer { .. });
        // Both closures of every gap between consecutive observed values.
        let mut cands: Vec<(f64, bool)> = Vec::with_capacity(2 * distinct.len());
        for w in distinct.windows(2) {
            cands.push((w[0], true));
            if !(integer && w[1] == w[0] + 1.0) {
                cands.push((w[1], false));
            }
        }
        let (splits, delta, ok, point) = self.score_thresholds(t, leaf, f, affected, &cands, &leaf_vals, leaf_miss);
        if !point.iter().any(|&p| p) {
            return pick(splits, delta, ok);
        }
        // A closure that would cut some cell down to a single point is out;
        // the gap still gets an interior candidate at its midpoint.
        let mut blocked: Vec<f64> = cands.iter().zip(&point).filter(|(_, &p)| p).map(|(c, _)| c.0).collect();
        blocked.dedup();
        let mut with_mid = Vec::with_capacity(cands.len() + blocked.len());
        for w in distinct.windows(2) {
            with_mid.push((w[0], true));
            let mid = 0.5 * (w[0] + w[1]);
            if (blocked.contains(&w[0]) || blocked.contains(&w[1])) && w[0] < mid && mid < w[1] {
                with_mid.push((mid, true));
            }
            if !(integer && w[1] == w[0] + 1.0) {
                with_mid.push((w[1], false));
            }
        }
        let (splits, delta, ok, _) = self.score_thresholds(t, leaf, f, affected, &with_mid, &leaf_vals, leaf_miss);
        pick(splits, delta, ok)
    }

    /// Risk change of every threshold in `cands` (sorted by value), with
    /// admissibility and a flag for candidates rejected as point cuts.
    #[allow(clippy::too_many_arguments)]
    fn score_thresholds(
        &self,
        t: usize,
        leaf: NodeId,
        f: usize,
        affected: &[usize],
        cands: &[(f64, bool)],
        leaf_vals: &[f64],
        leaf_miss: usize,
    ) -> (Vec<Split>, Vec<f64>, Vec<bool>, Vec<bool>) {
        let node = self.trees[t].node(leaf);
        let splits: Vec<Split> = cands
            .iter()
            .map(|&(value, inclusive)| Split::Threshold {
                feature: f,
                value,
                inclusive,
            })
            .collect();
        let n = splits.len();
        let mut delta = vec![0.0; n];
        let mut ok = vec![true; n];
        let mut point = vec![false; n];

        // Leaf-level child counts; they drive the guard and, in EOGT mode, p_ν.
        let mut leaf_right = vec![0usize; n];
        let mut ptr = 0;
        for (j, s) in splits.iter().enumerate() {
            while ptr < leaf_vals.len() && !s.goes_right(leaf_vals[ptr]) {
                ptr += 1;
            }
            let nl = ptr + leaf_miss;
            let nr = leaf_vals.len() - ptr + leaf_miss;
            leaf_right[j] = nr;
            if nl < self.cfg.min_leaf_rows || nr < self.cfg.min_leaf_rows {
                ok[j] = false;
            }
        }
        let leaf_part = node.support.part(f);

        for &ci in affected {
            let cell = &self.cells[ci];
            let r = cell.support.part(f);
            let (lo, hi) = bounds(r);
            let start = cands.partition_point(|c| c.0 < lo);
            let end = cands.partition_point(|c| c.0 <= hi);
            if start >= end {
                continue;
            }
            let (vals, miss) = self.cell_column(cell, f);
            let total: f64 = vals.iter().map(|v| v.1).sum();
            let parent = self.risk(cell.mass, cell.umass);
            let full = r.measure();
            let mut ptr = 0;
            let mut wl = 0.0;
            for j in start..end {
                let s = &splits[j];
                let left = s.restrict(r, false);
                let right = s.restrict(r, true);
                if left.is_empty() || right.is_empty() {
                    continue;
                }
                if is_point(&left) || is_point(&right) {
                    ok[j] = false;
                    point[j] = true;
                    continue;
                }
                while ptr < vals.len() && !s.goes_right(vals[ptr].0) {
                    wl += vals[ptr].1;
                    ptr += 1;
                }
                let (ml, mr) = match self.cfg.mode {
                    Mode::Gf => {
                        let lf = left.measure() / full;
                        ((wl + miss * lf) / self.m(), (total - wl + miss * (1.0 - lf)) / self.m())
                    }
                    Mode::Eogt => {
                        let p_nu = leaf_right[j] as f64 / node.count as f64;
                        let q = corrected_probability(
                            p_nu,
                            &right,
                            &s.restrict(leaf_part, true),
                            &left,
                            &s.restrict(leaf_part, false),
                        );
                        (cell.mass * (1.0 - q), cell.mass * q)
                    }
                };
                let ul = cell.umass * left.measure() / full;
                let ur = cell.umass * right.measure() / full;
                delta[j] += self.risk(ml, ul) + self.risk(mr, ur) - parent;
            }
        }
        (splits, delta, ok, point)
    }

    fn best_subset(&self, t: usize, leaf: NodeId, f: usize, affected: &[usize]) -> Option<Candidate> {
        let node = self.trees[t].node(leaf);
        let Restriction::Subset(leaf_set) = node.support.part(f) else {
            return None;
        };
        let mods: Vec<usize> = leaf_set.iter().collect();
        let k = mods.len();
        if k < 2 {
            return None;
        }
        let universe = leaf_set.universe();
        // Right sets never contain the first modality of the leaf, so each
        // binary partition appears once.
        let rights: Vec<CatSet> = if k <= self.cfg.cat_cutoff && k <= 63 {
            (1u64..(1u64 << (k - 1)))
                .map(|mask| {
                    CatSet::from_indices(universe, (0..k - 1).filter(|b| mask >> b & 1 == 1).map(|b| mods[b + 1]))
                })
                .collect()
        } else {
            let mut rng = rng::substream(self.cfg.seed, 0xCA7, (self.iterations as u64) << 20 | f as u64);
            let mut sets: Vec<CatSet> = (0..self.cfg.cat_samples)
                .filter_map(|_| {
                    let s = CatSet::from_indices(universe, mods[1..].iter().copied().filter(|_| rng.random::<bool>()));
                    (!s.is_empty()).then_some(s)
                })
                .collect();
            sets.sort();
            sets.dedup();
            sets
        };
        let splits: Vec<Split> = rights
            .into_iter()
            .map(|right| Split::Subset { feature: f, right })
            .collect();
        let n = splits.len();
        let mut delta = vec![0.0; n];
        let mut ok = vec![true; n];

        let mut leaf_hist = vec![0usize; universe];
        let mut leaf_miss = 0;
        for r in self.node_rows[t][leaf].iter() {
            match self.data.row(r)[f] {
                Some(v) => leaf_hist[v as usize] += 1,
                None => leaf_miss += 1,
            }
        }
        let leaf_total: usize = leaf_hist.iter().sum();
        let mut leaf_right = vec![0usize; n];
        for (j, s) in splits.iter().enumerate() {
            let Split::Subset { right, .. } = s else { unreachable!() };
            let nr_obs: usize = right.iter().map(|i| leaf_hist[i]).sum();
            let nl = leaf_total - nr_obs + leaf_miss;
            let nr = nr_obs + leaf_miss;
            leaf_right[j] = nr;
            if nl < self.cfg.min_leaf_rows || nr < self.cfg.min_leaf_rows {
                ok[j] = false;
            }
        }
        let leaf_part = node.support.part(f);

        for &ci in affected {
            let cell = &self.cells[ci];
            let r = cell.support.part(f);
            let (vals, miss) = self.cell_column(cell, f);
            let mut hist = vec![0.0; universe];
            for (v, w) in vals {
                hist[v as usize] += w;
            }
            let total: f64 = hist.iter().sum();
            let parent = self.risk(cell.mass, cell.umass);
            let full = r.measure();
            for (j, s) in splits.iter().enumerate() {
                if !ok[j] {
                    continue;
                }
                let left = s.restrict(r, false);
                let right = s.restrict(r, true);
                if left.is_empty() || right.is_empty() {
                    continue;
                }
                let Restriction::Subset(rs) = &right else { unreachable!() };
                let wr: f64 = rs.iter().map(|i| hist[i]).sum();
                let (ml, mr) = match self.cfg.mode {
                    Mode::Gf => {
                        let rf = right.measure() / full;
                        ((total - wr + miss * (1.0 - rf)) / self.m(), (wr + miss * rf) / self.m())
                    }
                    Mode::Eogt => {
                        let p_nu = leaf_right[j] as f64 / node.count as f64;
                        let q = corrected_probability(
                            p_nu,
                            &right,
                            &s.restrict(leaf_part, true),
                            &left,
                            &s.restrict(leaf_part, false),
                        );
                        (cell.mass * (1.0 - q), cell.mass * q)
                    }
                };
                let ul = cell.umass * left.measure() / full;
                let ur = cell.umass * right.measure() / full;
                delta[j] += self.risk(ml, ul) + self.risk(mr, ur) - parent;
            }
        }
        pick(splits, delta, ok)
    }

    /// Rows of `leaf` on each side of `split` (missing values go both ways).
    fn child_rows(&self, t: usize, leaf: NodeId, split: &Split) -> (RowSet, RowSet) {
        let m = self.data.m();
        let (mut l, mut r) = (RowSet::empty(m), RowSet::empty(m));
        let f = split.feature();
        for row in self.node_rows[t][leaf].iter() {
            match self.data.row(row)[f] {
                None => {
                    l.insert(row);
                    r.insert(row);
                }
                Some(v) if split.goes_right(v) => r.insert(row),
                Some(_) => l.insert(row),
            }
        }
        (l, r)
    }

    /// Pieces of every affected cell: `(cell index, side, support, rows,
    /// mass, uniform mass)`; side is `true` for the right child.
    fn pieces(&self, t: usize, leaf: NodeId, split: &Split) -> Vec<(usize, bool, Support, RowSet, f64, f64)> {
        let (lrows, rrows) = self.child_rows(t, leaf, split);
        let node = self.trees[t].node(leaf);
        let f = split.feature();
        let p_nu = rrows.count() as f64 / node.count as f64;
        let xr = split.restrict(node.support.part(f), true);
        let xl = split.restrict(node.support.part(f), false);
        let mut out = Vec::new();
        for ci in self.affected(t, leaf) {
            let cell = &self.cells[ci];
            let r = cell.support.part(f);
            let right = split.restrict(r, true);
            let left = split.restrict(r, false);
            let q = corrected_probability(p_nu, &right, &xr, &left, &xl);
            for (side, part, rows, share) in [(false, left, &lrows, 1.0 - q), (true, right, &rrows, q)] {
                if part.is_empty() {
                    continue;
                }
                let rows = cell.rows.intersection(rows);
                let support = cell.support.with_part(f, part.clone());
                let mass = match self.cfg.mode {
                    Mode::Gf => self.mass_of(&rows, &support),
                    Mode::Eogt => cell.mass * share,
                };
                let full = r.measure();
                let umass = if full == 0.0 { cell.umass } else { cell.umass * part.measure() / full };
                out.push((ci, side, support, rows, mass, umass));
            }
        }
        out
    }

    /// poprisk(after) - poprisk(before), over the affected cells only.
    pub fn risk_delta(&self, t: usize, leaf: NodeId, split: &Split) -> f64 {
        let mut delta = 0.0;
        for ci in self.affected(t, leaf) {
            let c = &self.cells[ci];
            delta -= self.risk(c.mass, c.umass);
        }
        for (_, _, _, _, mass, umass) in self.pieces(t, leaf, split) {
            delta += self.risk(mass, umass);
        }
        delta
    }

    /// The same difference written as minus the sum over affected cells of
    /// the Jensen gaps of g(t) = (πt + 1 - π) L̄(πt / (πt + 1 - π)).
    pub fn jensen_delta(&self, t: usize, leaf: NodeId, split: &Split) -> f64 {
        let pi = self.cfg.prior;
        let loss = self.cfg.loss;
        let term = |p_r: f64, p_u: f64| {
            if p_u == 0.0 {
                pi * p_r * loss.bayes_risk(1.0)
            } else {
                let x = p_r / p_u;
                let s = pi * x + 1.0 - pi;
                p_u * s * loss.bayes_risk(pi * x / s)
            }
        };
        let pieces = self.pieces(t, leaf, split);
        let mut gaps = 0.0;
        for ci in self.affected(t, leaf) {
            let c = &self.cells[ci];
            let mut gap = term(c.mass, c.umass);
            for p in pieces.iter().filter(|p| p.0 == ci) {
                gap -= term(p.4, p.5);
            }
            gaps += gap;
        }
        -gaps
    }

    /// Apply `split` at `leaf` of tree `t` and return the WLA witness.
    pub fn apply(&mut self, t: usize, leaf: NodeId, split: Split) -> Result<WlaWitness> {
        let pieces = self.pieces(t, leaf, &split);
        let (lrows, rrows) = self.child_rows(t, leaf, &split);
        let leaves_before = self.trees[t].num_leaves();
        let (l, r) = self.trees[t].split_leaf(leaf, split)?;
        debug_assert_eq!(l, self.node_rows[t].len());
        self.node_rows[t].push(lrows);
        self.node_rows[t].push(rrows);
        let counts: Vec<usize> = self.node_rows[t].iter().map(RowSet::count).collect();
        self.trees[t].set_counts(&counts);

        let schema = self.data.schema();
        let node = self.trees[t].node(leaf);
        let u = |n: NodeId| crate::measure::uniform_mass(schema, &self.trees[t].node(n).support);
        let p_r_leaf = node.count as f64 / self.m();
        let p_u_leaf = u(leaf);
        let pi = self.cfg.prior;
        let p_m = pi * p_r_leaf + (1.0 - pi) * p_u_leaf;
        let witness = WlaWitness {
            gamma: (counts[r] as f64 / node.count as f64 - u(r) / p_u_leaf).abs(),
            kappa_hat: pi * p_r_leaf / p_m,
            leaf_mass_m: p_m,
            leaf_bound: 1.0 / leaves_before as f64,
        };

        let old = std::mem::take(&mut self.cells);
        let mut kept: Vec<Cell> = old.iter().filter(|c| c.leaves[t] != leaf).cloned().collect();
        for (ci, side, support, rows, mass, umass) in pieces {
            let mut leaves = old[ci].leaves.clone();
            leaves[t] = if side { r } else { l };
            kept.push(Cell {
                leaves,
                support,
                rows,
                mass,
                umass,
            });
        }
        self.cells = kept;
        self.iterations += 1;
        Ok(witness)
    }

    /// One greedy iteration. Returns `None` when no leaf admits a split.
    pub fn step(&mut self) -> Result<Option<TrainStep>> {
        let Some((t, leaf, split)) = self.pick_tree_and_leaf() else {
            return Ok(None);
        };
        let iteration = self.iterations + 1;
        let witness = self.apply(t, leaf, split.clone())?;
        Ok(Some(TrainStep {
            iteration,
            tree: t,
            leaf,
            split,
            poprisk: self.poprisk(),
            witness,
        }))
    }

    pub fn into_forest(self) -> Result<GenerativeForest> {
        match self.cfg.mode {
            Mode::Gf => GenerativeForest::new_gf(self.data, self.trees, self.cfg.prior, self.cfg.loss),
            Mode::Eogt => {
                GenerativeForest::new_eogt(self.data.schema().clone(), self.trees, self.cfg.prior, self.cfg.loss)
            }
        }
    }
}

fn bounds(r: &Restriction) -> (f64, f64) {
    match r {
        Restriction::Interval { lo, hi, .. } => (*lo, *hi),
        Restriction::Ints { lo, hi } => (*lo as f64, *hi as f64),
        Restriction::Subset(_) => (f64::NEG_INFINITY, f64::INFINITY),
    }
}

fn is_point(r: &Restriction) -> bool {
    matches!(r, Restriction::Interval { lo, hi, .. } if lo == hi) && !r.is_empty()
}

/// Lowest delta; the first candidate wins ties.
fn pick(splits: Vec<Split>, delta: Vec<f64>, ok: Vec<bool>) -> Option<Candidate> {
    let mut best: Option<usize> = None;
    for j in 0..splits.len() {
        if ok[j] && best.is_none_or(|b| delta[j] < delta[b]) {
            best = Some(j);
        }
    }
    best.map(|j| Candidate {
        split: splits[j].clone(),
        delta: delta[j],
    })
}

/// Train a forest with `cfg.splits` greedy iterations.
pub fn train(data: impl Into<Arc<Dataset>>, cfg: &TrainConfig) -> Result<(GenerativeForest, TrainHistory)> {
    let mut trainer = Trainer::new(data, cfg.clone())?;
    let mut history = TrainHistory {
        initial_poprisk: trainer.poprisk(),
        ..Default::default()
    };
    for _ in 0..cfg.splits {
        match trainer.step()? {
            Some(step) => history.steps.push(step),
            None => {
                history.stopped_early = true;
                break;
            }
        }
    }
    Ok((trainer.into_forest()?, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Feature, Schema};
    use crate::measure;

    fn line(values: &[f64], lo: f64, hi: f64) -> Arc<Dataset> {
        let schema = Schema::new(vec![Feature {
            name: "x".into(),
            domain: FeatureDomain::Real { lo, hi },
        }])
        .unwrap();
        Arc::new(Dataset::new(schema, values.iter().map(|&v| vec![Some(v)]).collect()).unwrap())
    }

    fn plane(rows: &[[f64; 2]]) -> Arc<Dataset> {
        let schema = Schema::new(vec![
            Feature {
                name: "x".into(),
                domain: FeatureDomain::Real { lo: 0.0, hi: 1.0 },
            },
            Feature {
                name: "y".into(),
                domain: FeatureDomain::Real { lo: 0.0, hi: 1.0 },
            },
        ])
        .unwrap();
        Arc::new(Dataset::new(schema, rows.iter().map(|r| vec![Some(r[0]), Some(r[1])]).collect()).unwrap())
    }

    fn scatter(n: usize, seed: u64) -> Arc<Dataset> {
        let mut rng = rng::stream(seed, 0);
        let rows: Vec<[f64; 2]> = (0..n)
            .map(|_| {
                let x: f64 = rng.random::<f64>().powi(2);
                [x, (x + 0.3 * rng.random::<f64>()).min(1.0)]
            })
            .collect();
        plane(&rows)
    }

    #[test]
    fn zero_splits_gives_prior_risk() {
        for loss in Loss::ALL {
            let cfg = TrainConfig {
                trees: 3,
                loss,
                prior: 0.3,
                ..Default::default()
            };
            let (f, h) = train(scatter(20, 1), &cfg).unwrap();
            assert!((h.initial_poprisk - loss.bayes_risk(0.3)).abs() < 1e-15);
            assert_eq!(f.leaf_counts(), vec![1, 1, 1]);
        }
    }

    #[test]
    fn j_equals_t_gives_stumps() {
        let cfg = TrainConfig::new(4, 4);
        let (f, h) = train(scatter(50, 2), &cfg).unwrap();
        assert_eq!(f.leaf_counts(), vec![2, 2, 2, 2]);
        let trees: Vec<usize> = h.steps.iter().map(|s| s.tree).collect();
        assert_eq!(trees, vec![0, 1, 2, 3]);
    }

    #[test]
    fn heaviest_leaf_rule() {
        let ds = line(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95], 0.0, 1.0);
        let mut tr = Trainer::new(ds, TrainConfig::new(2, 0)).unwrap();
        assert_eq!(tr.leaf_order()[0], (0, 0));
        tr.apply(0, 0, Split::le(0, 0.7)).unwrap();
        assert_eq!(tr.leaf_order()[0], (1, 0));
        tr.apply(1, 0, Split::le(0, 0.4)).unwrap();
        // Masses 0.7/0.3 in tree 0, 0.4/0.6 in tree 1.
        assert_eq!(tr.leaf_order()[0], (0, 1));
        let mut tie = Trainer::new(line(&[0.1, 0.2, 0.3, 0.4, 0.6], 0.0, 1.0), TrainConfig::new(1, 0)).unwrap();
        tie.apply(0, 0, Split::le(0, 0.25)).unwrap();
        tie.apply(0, 2, Split::le(0, 0.5)).unwrap();
        // Leaves 1, 3, 4 carry 2, 2 and 1 rows.
        assert_eq!(tie.leaf_order()[0], (0, 1));
    }

    #[test]
    fn constant_leaf_has_no_split() {
        let tr = Trainer::new(plane(&[[0.5, 0.5], [0.5, 0.5]]), TrainConfig::new(1, 1)).unwrap();
        assert!(tr.split_pred(0, 0).is_none());
        let (_, h) = train(plane(&[[0.5, 0.5], [0.5, 0.5]]), &TrainConfig::new(1, 3)).unwrap();
        assert!(h.stopped_early);
        assert!(h.steps.is_empty());
    }

    #[test]
    fn sweep_matches_direct_delta() {
        for mode in [Mode::Gf, Mode::Eogt] {
            let cfg = TrainConfig {
                trees: 3,
                splits: 0,
                mode,
                ..Default::default()
            };
            let mut tr = Trainer::new(scatter(60, 5), cfg).unwrap();
            for _ in 0..7 {
                let (t, l, s) = tr.pick_tree_and_leaf().unwrap();
                let best = tr.best_split(t, l).unwrap();
                let direct = tr.risk_delta(t, l, &s);
                assert!((best.delta - direct).abs() < 1e-12, "{} vs {}", best.delta, direct);
                assert!(direct <= 1e-12);
                let before = tr.poprisk();
                tr.apply(t, l, s).unwrap();
                assert!((tr.poprisk() - before - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn incremental_matches_full_recompute() {
        let ds = scatter(80, 9);
        let (f, h) = train(ds, &TrainConfig::new(3, 9)).unwrap();
        let full = measure::poprisk(&f, Loss::Square, 0.5).unwrap();
        assert!((full - h.final_poprisk()).abs() < 1e-12);
        assert_eq!(
            f.enumerate_partition(10_000).unwrap().len(),
            {
                let mut tr = Trainer::new(scatter(80, 9), TrainConfig::new(3, 0)).unwrap();
                for _ in 0..9 {
                    tr.step().unwrap();
                }
                tr.partition_size()
            }
        );
    }

    #[test]
    fn balanced_split_is_neutral() {
        // Both halves hold the same share of rows as of length.
        let ds = line(&[0.1, 0.3, 0.6, 0.8], 0.0, 1.0);
        let tr = Trainer::new(ds, TrainConfig::new(1, 0)).unwrap();
        assert!(tr.risk_delta(0, 0, &Split::le(0, 0.5)).abs() < 1e-15);
    }

    #[test]
    fn jensen_identity() {
        let mut tr = Trainer::new(scatter(40, 3), TrainConfig::new(2, 0)).unwrap();
        for _ in 0..5 {
            let (t, l, s) = tr.pick_tree_and_leaf().unwrap();
            assert!((tr.jensen_delta(t, l, &s) - tr.risk_delta(t, l, &s)).abs() < 1e-12);
            tr.apply(t, l, s).unwrap();
        }
    }

    #[test]
    fn categorical_and_integer_splits() {
        let schema = Schema::new(vec![
            Feature {
                name: "c".into(),
                domain: FeatureDomain::Categorical {
                    modalities: vec!["a".into(), "b".into(), "c".into(), "d".into()],
                },
            },
            Feature {
                name: "k".into(),
                domain: FeatureDomain::Integer { lo: 0, hi: 9 },
            },
        ])
        .unwrap();
        let rows: Vec<Vec<Option<f64>>> = (0..40)
            .map(|i| vec![Some((i % 2) as f64), Some(if i % 2 == 0 { 1.0 } else { (i % 10) as f64 })])
            .collect();
        let ds = Arc::new(Dataset::new(schema, rows).unwrap());
        let (f, h) = train(ds.clone(), &TrainConfig::new(1, 3)).unwrap();
        assert_eq!(h.steps.len(), 3);
        assert!(h.poprisks().windows(2).all(|w| w[1] < w[0]));
        let cells = f.enumerate_partition(100).unwrap();
        assert_eq!(cells.iter().map(|c| c.count.unwrap()).sum::<usize>(), 40);

        // Above the cutoff the sampled search still finds admissible subsets.
        let cfg = TrainConfig {
            trees: 1,
            splits: 2,
            cat_cutoff: 2,
            cat_samples: 16,
            ..Default::default()
        };
        let (_, h) = train(ds, &cfg).unwrap();
        assert_eq!(h.steps.len(), 2);
    }

    #[test]
    fn missing_values_are_wildcards() {
        let schema = Schema::new(vec![Feature {
            name: "x".into(),
            domain: FeatureDomain::Real { lo: 0.0, hi: 1.0 },
        }])
        .unwrap();
        let rows = vec![vec![Some(0.1)], vec![None], vec![Some(0.9)], vec![Some(0.2)]];
        let ds = Arc::new(Dataset::new(schema, rows).unwrap());
        let (f, _) = train(ds, &TrainConfig::new(1, 1)).unwrap();
        let (l, r) = f.tree(0).children(0).unwrap();
        assert_eq!(f.tree(0).node(l).count + f.tree(0).node(r).count, 5);
    }

    #[test]
    fn deterministic() {
        let cfg = TrainConfig::new(3, 10);
        let (a, ha) = train(scatter(100, 4), &cfg).unwrap();
        let (b, hb) = train(scatter(100, 4), &cfg).unwrap();
        assert_eq!(a.to_model_string(), b.to_model_string());
        assert_eq!(ha, hb);
    }

    #[test]
    fn eogt_mode_trains_and_converts() {
        let cfg = TrainConfig {
            trees: 1,
            splits: 5,
            mode: Mode::Eogt,
            ..Default::default()
        };
        let (e, h) = train(scatter(60, 8), &cfg).unwrap();
        assert_eq!(e.mode(), Mode::Eogt);
        let (g, hg) = train(scatter(60, 8), &TrainConfig::new(1, 5)).unwrap();
        // With a single tree the chained estimate is exact.
        assert_eq!(e.trees(), g.to_eogt().unwrap().trees());
        for (a, b) in h.poprisks().iter().zip(hg.poprisks()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn history_csv() {
        let ds = scatter(30, 1);
        let schema = ds.schema().clone();
        let (_, h) = train(ds, &TrainConfig::new(2, 3)).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf, &schema).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("iteration,tree,leaf,feature,split,poprisk"));
    }

    #[test]
    fn invalid_configs() {
        let ds = scatter(5, 1);
        assert!(Trainer::new(ds.clone(), TrainConfig::new(0, 1)).is_err());
        let cfg = TrainConfig {
            prior: 1.0,
            ..Default::default()
        };
        assert!(Trainer::new(ds.clone(), cfg).is_err());
        let cfg = TrainConfig {
            cat_cutoff: 1,
            ..Default::default()
        };
        assert!(Trainer::new(ds, cfg).is_err());
    }
}
