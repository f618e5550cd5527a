//! Sampling from a forest.
//!
//! One observation is generated by descending every tree with a biased coin
//! per internal node while shrinking a running support `C` to the
//! intersection of the reached nodes, then drawing uniformly inside the final
//! `C`. In GF mode the coin uses training counts restricted to `C`; in EOGT
//! mode it corrects the stored arc probability with uniform-measure ratios.

use rand::Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::forest::{GenerativeForest, Mode, NodeId, Tree};
use crate::measure::{self, Restriction, Support};
use crate::rng;
use crate::rowset::RowSet;

/// Order in which trees are advanced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Ordering {
    /// Tree 0 to a leaf, then tree 1, and so on.
    #[default]
    Iterative,
    /// Each step advances a tree drawn uniformly among those not done.
    Randomized,
}

impl std::str::FromStr for Ordering {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iterative" => Ok(Ordering::Iterative),
            "randomized" => Ok(Ordering::Randomized),
            other => Err(Error::InvalidArgument(format!("unknown ordering `{other}`"))),
        }
    }
}

/// Per-observation sampler state: one star node per tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplerState {
    pub star: Vec<NodeId>,
    pub done: Vec<bool>,
}

impl SamplerState {
    pub fn all_done(&self) -> bool {
        self.done.iter().all(|&d| d)
    }
}

/// Running support with, in GF mode, the training rows compatible with it.
#[derive(Clone, Debug)]
pub struct Cursor {
    pub support: Support,
    pub rows: Option<RowSet>,
}

impl Cursor {
    pub fn full(forest: &GenerativeForest) -> Self {
        Cursor {
            support: Support::full(forest.schema()),
            rows: forest.training_rows().map(RowSet::full),
        }
    }
}

pub fn init_sampling(forest: &GenerativeForest) -> SamplerState {
    SamplerState {
        star: vec![Tree::ROOT; forest.trees().len()],
        done: forest.trees().iter().map(|t| t.node(Tree::ROOT).is_leaf()).collect(),
    }
}

/// Probability of taking the right arc at `node` of tree `t` given the
/// current cursor.
pub fn branch_probability(forest: &GenerativeForest, t: usize, node: NodeId, cursor: &Cursor) -> f64 {
    let tree = forest.tree(t);
    let (l, r) = tree.children(node).expect("internal node");
    match forest.mode() {
        Mode::Gf => {
            let rows = cursor.rows.as_ref().expect("GF cursor carries rows");
            let (wr, wl) = if forest.has_missing() {
                // A row missing the split value is shared between the sides
                // in proportion to their length, so masses stay additive.
                let w = |c: NodeId| {
                    let mut cr = cursor.clone();
                    descend(forest, t, node, c == r, &mut cr);
                    forest.spread_count(cr.rows.as_ref().expect("GF"), &cr.support)
                };
                (w(r), w(l))
            } else {
                (
                    rows.intersection_count(forest.node_rows(t, r).expect("bound")) as f64,
                    rows.intersection_count(forest.node_rows(t, l).expect("bound")) as f64,
                )
            };
            assert!(wr + wl > 0.0, "star update from a support with zero empirical mass");
            wr / (wr + wl)
        }
        Mode::Eogt => {
            let split = tree.split_of(node).expect("internal node");
            let f = split.feature();
            let p = tree.p_right(node).unwrap_or(0.5);
            let p = if p.is_nan() { 0.5 } else { p };
            let c = cursor.support.part(f);
            let ct = c.intersect(tree.node(r).support.part(f));
            let cf = c.intersect(tree.node(l).support.part(f));
            corrected_probability(p, &ct, tree.node(r).support.part(f), &cf, tree.node(l).support.part(f))
        }
    }
}

/// p̂ = u(C_t|X_r) p / (u(C_t|X_r) p + u(C_f|X_l) (1 - p)), where only the
/// split feature matters because the other factors cancel.
pub(crate) fn corrected_probability(p: f64, ct: &Restriction, xr: &Restriction, cf: &Restriction, xl: &Restriction) -> f64 {
    if ct.is_empty() {
        return 0.0;
    }
    if cf.is_empty() {
        return 1.0;
    }
    let ratio = |c: &Restriction, x: &Restriction| {
        let mx = x.measure();
        if mx == 0.0 {
            1.0
        } else {
            c.measure() / mx
        }
    };
    let a = ratio(ct, xr) * p;
    let b = ratio(cf, xl) * (1.0 - p);
    if a + b == 0.0 {
        p
    } else {
        a / (a + b)
    }
}

/// Move the cursor into child `right` of node `node` of tree `t`.
fn descend(forest: &GenerativeForest, t: usize, node: NodeId, right: bool, cursor: &mut Cursor) -> NodeId {
    let tree = forest.tree(t);
    let (l, r) = tree.children(node).expect("internal node");
    let child = if right { r } else { l };
    let split = tree.split_of(node).expect("internal node");
    let f = split.feature();
    let part = cursor.support.part(f).intersect(tree.node(child).support.part(f));
    cursor.support = cursor.support.with_part(f, part);
    if let Some(rows) = cursor.rows.as_mut() {
        rows.intersect_with(forest.node_rows(t, child).expect("bound"));
    }
    child
}

/// One coin toss at the star node of tree `t`. Returns the new star node.
pub fn star_update<R: Rng + ?Sized>(
    forest: &GenerativeForest,
    t: usize,
    state: &mut SamplerState,
    cursor: &mut Cursor,
    rng: &mut R,
) -> NodeId {
    let node = state.star[t];
    debug_assert!(!state.done[t]);
    debug_assert!(
        cursor.support.is_subset_of(&forest.tree(t).node(node).support),
        "running support escaped the star node"
    );
    let p = branch_probability(forest, t, node, cursor);
    let right = rng.random::<f64>() < p;
    let child = descend(forest, t, node, right, cursor);
    state.star[t] = child;
    state.done[t] = forest.tree(t).node(child).is_leaf();
    child
}

pub fn iterative_update_support<R: Rng + ?Sized>(forest: &GenerativeForest, rng: &mut R) -> Support {
    let mut state = init_sampling(forest);
    let mut cursor = Cursor::full(forest);
    for t in 0..forest.trees().len() {
        while !state.done[t] {
            star_update(forest, t, &mut state, &mut cursor, rng);
        }
    }
    cursor.support
}

pub fn randomized_update_support<R: Rng + ?Sized>(forest: &GenerativeForest, rng: &mut R) -> Support {
    let mut state = init_sampling(forest);
    let mut cursor = Cursor::full(forest);
    let mut open: Vec<usize> = (0..forest.trees().len()).filter(|&t| !state.done[t]).collect();
    while !open.is_empty() {
        let i = rng.random_range(0..open.len());
        let t = open[i];
        star_update(forest, t, &mut state, &mut cursor, rng);
        if state.done[t] {
            open.swap_remove(i);
        }
    }
    cursor.support
}

/// Leaves reached by one sampling run, together with the final support.
pub fn sample_leaves<R: Rng + ?Sized>(
    forest: &GenerativeForest,
    ordering: Ordering,
    rng: &mut R,
) -> (Vec<NodeId>, Support) {
    let mut state = init_sampling(forest);
    let mut cursor = Cursor::full(forest);
    match ordering {
        Ordering::Iterative => {
            for t in 0..forest.trees().len() {
                while !state.done[t] {
                    star_update(forest, t, &mut state, &mut cursor, rng);
                }
            }
        }
        Ordering::Randomized => {
            let mut open: Vec<usize> = (0..forest.trees().len()).filter(|&t| !state.done[t]).collect();
            while !open.is_empty() {
                let i = rng.random_range(0..open.len());
                let t = open[i];
                star_update(forest, t, &mut state, &mut cursor, rng);
                if state.done[t] {
                    open.swap_remove(i);
                }
            }
        }
    }
    (state.star, cursor.support)
}

/// Draw a point uniformly from a support. Excluded interval end points are
/// resampled.
pub fn draw_uniform<R: Rng + ?Sized>(support: &Support, rng: &mut R) -> Vec<f64> {
    support.parts().iter().map(|r| draw_restriction(r, rng)).collect()
}

pub fn draw_restriction<R: Rng + ?Sized>(r: &Restriction, rng: &mut R) -> f64 {
    assert!(!r.is_empty(), "uniform draw from an empty restriction");
    match r {
        Restriction::Interval { lo, hi, .. } => {
            if lo == hi {
                return *lo;
            }
            loop {
                let v = lo + (hi - lo) * rng.random::<f64>();
                if r.contains(v) {
                    return v;
                }
            }
        }
        Restriction::Ints { lo, hi } => rng.random_range(*lo..=*hi) as f64,
        Restriction::Subset(s) => {
            let k = rng.random_range(0..s.count());
            s.iter().nth(k).expect("index within count") as f64
        }
    }
}

/// `n` observations. Observation `i` uses its own stream, so the output does
/// not depend on `n` or on the thread count.
pub fn generate(forest: &GenerativeForest, n: usize, seed: u64, ordering: Ordering) -> Result<Dataset> {
    let rows: Vec<Vec<Option<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            let (_, support) = sample_leaves(forest, ordering, &mut rng);
            draw_uniform(&support, &mut rng).into_iter().map(Some).collect()
        })
        .collect();
    Dataset::new_unchecked(forest.schema().clone(), rows)
}

/// Product of branch probabilities along the admissible sequence that
/// reaches `leaves`, advancing trees in the order given by `schedule` (one
/// entry per step; tree `t` must appear once per arc on its path). Returns 0
/// when a step is impossible.
pub fn schedule_probability(forest: &GenerativeForest, leaves: &[NodeId], schedule: &[usize]) -> f64 {
    let paths: Vec<Vec<NodeId>> = forest.trees().iter().zip(leaves).map(|(t, &l)| t.path(l)).collect();
    let mut pos = vec![0usize; paths.len()];
    let mut cursor = Cursor::full(forest);
    let mut prob = 1.0;
    for &t in schedule {
        let node = paths[t][pos[t]];
        let next = paths[t][pos[t] + 1];
        let p = branch_probability(forest, t, node, &cursor);
        let (_, r) = forest.tree(t).children(node).expect("internal node");
        let right = next == r;
        prob *= if right { p } else { 1.0 - p };
        if prob == 0.0 {
            return 0.0;
        }
        descend(forest, t, node, right, &mut cursor);
        pos[t] += 1;
    }
    prob
}

/// Probability of reaching `leaves` under the iterative ordering.
pub fn sequence_probability(forest: &GenerativeForest, leaves: &[NodeId]) -> f64 {
    let schedule = iterative_schedule(forest, leaves);
    schedule_probability(forest, leaves, &schedule)
}

pub fn iterative_schedule(forest: &GenerativeForest, leaves: &[NodeId]) -> Vec<usize> {
    let mut s = Vec::new();
    for (t, &l) in leaves.iter().enumerate() {
        let depth = forest.tree(t).node(l).depth;
        s.extend(std::iter::repeat_n(t, depth));
    }
    s
}

/// Every interleaving of the per-tree step sequences reaching `leaves`.
/// Exponential; meant for toy forests.
pub fn all_schedules(forest: &GenerativeForest, leaves: &[NodeId]) -> Vec<Vec<usize>> {
    let mut remaining: Vec<usize> = leaves
        .iter()
        .enumerate()
        .map(|(t, &l)| forest.tree(t).node(l).depth)
        .collect();
    let total: usize = remaining.iter().sum();
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(total);
    interleave(&mut remaining, &mut cur, total, &mut out);
    out
}

fn interleave(remaining: &mut [usize], cur: &mut Vec<usize>, total: usize, out: &mut Vec<Vec<usize>>) {
    if cur.len() == total {
        out.push(cur.clone());
        return;
    }
    for t in 0..remaining.len() {
        if remaining[t] > 0 {
            remaining[t] -= 1;
            cur.push(t);
            interleave(remaining, cur, total, out);
            cur.pop();
            remaining[t] += 1;
        }
    }
}

/// Model probability of every partition element, by enumeration.
pub fn exact_distribution(forest: &GenerativeForest) -> Result<Vec<(Vec<NodeId>, f64)>> {
    Ok(forest
        .enumerate_partition(crate::forest::DEFAULT_PARTITION_CAP)?
        .into_iter()
        .map(|e| {
            let p = sequence_probability(forest, &e.leaves);
            (e.leaves, p)
        })
        .collect())
}

/// KL(G ‖ Ĝ) by enumeration of the shared partition. `g` must be in GF mode
/// and `g_hat` must hold the same trees.
pub fn kl_divergence(g: &GenerativeForest, g_hat: &GenerativeForest) -> Result<f64> {
    if g.mode() != Mode::Gf {
        return Err(Error::WrongMode("KL divergence needs a GF as first argument"));
    }
    let mut kl = 0.0;
    for e in g.enumerate_partition(crate::forest::DEFAULT_PARTITION_CAP)? {
        let p = g.element_probability(&e);
        if p > 0.0 {
            let q = sequence_probability(g_hat, &e.leaves);
            kl += p * (p / q).ln();
        }
    }
    Ok(kl)
}

/// Realised constant ϰ̂: the largest |log(p_R[C_v|X_child] / p_U[C_v|X_child])|
/// over every star-update step reachable under the iterative ordering and
/// both of its branches. Branches whose support is empty are skipped.
pub fn kappa_hat(g: &GenerativeForest) -> Result<f64> {
    if g.mode() != Mode::Gf {
        return Err(Error::WrongMode("the realised constant needs a GF"));
    }
    let schema = g.schema();
    let mut worst: f64 = 0.0;
    let mut stack = vec![(0usize, Tree::ROOT, Cursor::full(g))];
    while let Some((t, node, cursor)) = stack.pop() {
        if t == g.trees().len() {
            continue;
        }
        let tree = g.tree(t);
        let Some((l, r)) = tree.children(node) else {
            stack.push((t + 1, Tree::ROOT, cursor));
            continue;
        };
        for child in [l, r] {
            let mut next = cursor.clone();
            descend(g, t, node, child == r, &mut next);
            if next.support.is_empty() {
                continue;
            }
            let x = &tree.node(child).support;
            let p_r = g.spread_count(next.rows.as_ref().expect("GF"), &next.support)
                / g.spread_count(g.node_rows(t, child).expect("GF"), x);
            let p_u = measure::uniform_mass(schema, &next.support) / measure::uniform_mass(schema, x);
            let k = (p_r / p_u).ln().abs();
            worst = worst.max(if k.is_nan() { f64::INFINITY } else { k });
            if next.rows.as_ref().expect("GF").count() > 0 {
                stack.push((t, child, next));
            }
        }
    }
    Ok(worst)
}

/// Empirical frequencies of partition elements over `n` sampling runs,
/// keyed by leaf tuple, in partition order.
pub fn empirical_distribution(
    forest: &GenerativeForest,
    n: usize,
    seed: u64,
    ordering: Ordering,
) -> Result<Vec<(Vec<NodeId>, usize)>> {
    let cells = forest.enumerate_partition(crate::forest::DEFAULT_PARTITION_CAP)?;
    let index: std::collections::HashMap<Vec<NodeId>, usize> =
        cells.iter().enumerate().map(|(i, e)| (e.leaves.clone(), i)).collect();
    let hits: Vec<usize> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            let (leaves, _) = sample_leaves(forest, ordering, &mut rng);
            index[&leaves]
        })
        .collect();
    let mut counts = vec![0usize; cells.len()];
    for h in hits {
        counts[h] += 1;
    }
    Ok(cells.into_iter().map(|e| e.leaves).zip(counts).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Feature, FeatureDomain, Schema};
    use crate::forest::Split;
    use crate::measure::{CatSet, Loss};
    use std::sync::Arc;

    fn square_data(rows: &[[f64; 2]]) -> Arc<Dataset> {
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

    fn stump(schema: &Schema, split: Split) -> Tree {
        let mut t = Tree::root_only(schema);
        t.split_leaf(0, split).unwrap();
        t
    }

    #[test]
    fn init_state() {
        let ds = square_data(&[[0.2, 0.2], [0.8, 0.8]]);
        let roots = GenerativeForest::root_only(ds.clone(), 3, 0.5, Loss::Square).unwrap();
        assert!(init_sampling(&roots).all_done());
        let s = GenerativeForest::new_gf(ds.clone(), vec![stump(ds.schema(), Split::le(0, 0.5))], 0.5, Loss::Square)
            .unwrap();
        let st = init_sampling(&s);
        assert_eq!(st.star, vec![0]);
        assert_eq!(st.done, vec![false]);
    }

    #[test]
    fn stump_three_to_one() {
        let ds = square_data(&[[0.1, 0.1], [0.2, 0.5], [0.3, 0.9], [0.9, 0.5]]);
        let f = GenerativeForest::new_gf(ds.clone(), vec![stump(ds.schema(), Split::le(0, 0.5))], 0.5, Loss::Square)
            .unwrap();
        let cur = Cursor::full(&f);
        assert!((branch_probability(&f, 0, 0, &cur) - 0.25).abs() < 1e-15);
        let counts = empirical_distribution(&f, 40_000, 3, Ordering::Iterative).unwrap();
        let right = counts.iter().find(|(l, _)| l == &vec![2]).unwrap().1 as f64 / 40_000.0;
        let sd = (0.25f64 * 0.75 / 40_000.0).sqrt();
        assert!((right - 0.25).abs() < 4.0 * sd, "{right}");
    }

    #[test]
    fn contained_support_forces_the_branch() {
        let ds = square_data(&[[0.1, 0.1], [0.2, 0.5], [0.7, 0.9], [0.9, 0.5]]);
        let s = ds.schema().clone();
        let f = GenerativeForest::new_gf(
            ds,
            vec![stump(&s, Split::le(0, 0.5)), stump(&s, Split::le(0, 0.6))],
            0.5,
            Loss::Square,
        )
        .unwrap();
        let mut cursor = Cursor::full(&f);
        descend(&f, 0, 0, true, &mut cursor);
        // x > 0.5 lies inside x > 0.6 for every training row.
        assert_eq!(branch_probability(&f, 1, 0, &cursor), 1.0);
        let e = f.to_eogt().unwrap();
        let mut ec = Cursor::full(&e);
        descend(&e, 0, 0, false, &mut ec);
        // x <= 0.5 is disjoint from x > 0.6.
        assert_eq!(branch_probability(&e, 1, 0, &ec), 0.0);
    }

    #[test]
    fn sequence_matches_counts() {
        let ds = square_data(&[
            [0.1, 0.1],
            [0.2, 0.7],
            [0.4, 0.4],
            [0.6, 0.2],
            [0.7, 0.8],
            [0.8, 0.3],
            [0.9, 0.9],
            [0.3, 0.6],
        ]);
        let s = ds.schema().clone();
        let mut t0 = stump(&s, Split::le(0, 0.5));
        t0.split_leaf(2, Split::le(1, 0.5)).unwrap();
        let f = GenerativeForest::new_gf(ds, vec![t0, stump(&s, Split::le(1, 0.35))], 0.5, Loss::Square).unwrap();
        for e in f.enumerate_partition(100).unwrap() {
            let p = sequence_probability(&f, &e.leaves);
            assert!((p - e.count.unwrap() as f64 / 8.0).abs() < 1e-12);
            for sched in all_schedules(&f, &e.leaves) {
                assert!((schedule_probability(&f, &e.leaves, &sched) - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_draws() {
        let r = Restriction::Interval {
            lo: 3.0,
            hi: 10.0,
            lo_closed: false,
            hi_closed: true,
        };
        let mut rng = rng::stream(1, 0);
        let n = 100_000;
        let mean = (0..n).map(|_| draw_restriction(&r, &mut rng)).sum::<f64>() / n as f64;
        let sd = (49.0f64 / 12.0 / n as f64).sqrt();
        assert!((mean - 6.5).abs() < 3.0 * sd, "{mean}");
        let single = Restriction::Subset(CatSet::from_indices(4, [2]));
        assert!((0..100).all(|_| draw_restriction(&single, &mut rng) == 2.0));

        let sup = Support::from_parts(vec![
            Restriction::Interval {
                lo: 0.0,
                hi: 1.0,
                lo_closed: true,
                hi_closed: true,
            },
            Restriction::Interval {
                lo: 2.0,
                hi: 3.0,
                lo_closed: true,
                hi_closed: false,
            },
        ]);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| draw_uniform(&sup, &mut rng)).collect();
        let mx = pts.iter().map(|p| p[0]).sum::<f64>() / n as f64;
        let my = pts.iter().map(|p| p[1]).sum::<f64>() / n as f64;
        let cov = pts.iter().map(|p| (p[0] - mx) * (p[1] - my)).sum::<f64>() / n as f64;
        let corr = cov / (1.0 / 12.0);
        assert!(corr.abs() < 3.0 / (n as f64).sqrt(), "{corr}");
    }

    #[test]
    fn generate_is_deterministic_and_handles_zero() {
        let ds = square_data(&[[0.1, 0.1], [0.2, 0.5], [0.7, 0.9], [0.9, 0.5]]);
        let f = GenerativeForest::new_gf(ds.clone(), vec![stump(ds.schema(), Split::le(0, 0.5))], 0.5, Loss::Square)
            .unwrap();
        let a = generate(&f, 50, 9, Ordering::Iterative).unwrap();
        let b = generate(&f, 50, 9, Ordering::Iterative).unwrap();
        assert_eq!(a, b);
        let c = generate(&f, 20, 9, Ordering::Iterative).unwrap();
        assert_eq!(&a.rows()[..20], c.rows());
        assert_eq!(generate(&f, 0, 9, Ordering::Iterative).unwrap().m(), 0);
    }
}
