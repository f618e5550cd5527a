//! Trees, generative forests and the cross-tree partition.
//!
//! A [`Tree`] is an arena of nodes; every node caches its support (the
//! intersection of the arc labels on its root path) and its training count.
//! A [`GenerativeForest`] in GF mode is bound to its training data through
//! per-node row sets; in EOGT mode it only keeps the per-arc branch
//! probabilities.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureDomain, Schema};
use crate::error::{Error, Result};
use crate::measure::{self, CatSet, Loss, Restriction, Support};
use crate::rowset::RowSet;
use crate::sampler;

pub type NodeId = usize;

pub const DEFAULT_PARTITION_CAP: usize = 1_000_000;

/// Axis-parallel splitting predicate. The right child holds the observations
/// for which the predicate is true.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Split {
    /// Numeric split. Left is `x <= value` when `inclusive`, `x < value`
    /// otherwise; right is the complement.
    Threshold {
        feature: usize,
        value: f64,
        inclusive: bool,
    },
    /// Categorical split, right is `x ∈ right`.
    Subset { feature: usize, right: CatSet },
}

impl Split {
    /// `x <= value` goes left, the usual convention.
    pub fn le(feature: usize, value: f64) -> Self {
        Split::Threshold {
            feature,
            value,
            inclusive: true,
        }
    }

    pub fn feature(&self) -> usize {
        match self {
            Split::Threshold { feature, .. } | Split::Subset { feature, .. } => *feature,
        }
    }

    pub fn goes_right(&self, v: f64) -> bool {
        match self {
            Split::Threshold { value, inclusive, .. } => {
                if *inclusive {
                    v > *value
                } else {
                    v >= *value
                }
            }
            Split::Subset { right, .. } => right.contains(v as usize),
        }
    }

    /// The part of `r` sent to the chosen side.
    pub fn restrict(&self, r: &Restriction, right: bool) -> Restriction {
        match (self, r) {
            (Split::Threshold { value, inclusive, .. }, Restriction::Interval { .. }) => {
                let side = if right {
                    Restriction::Interval {
                        lo: *value,
                        hi: f64::INFINITY,
                        lo_closed: !inclusive,
                        hi_closed: true,
                    }
                } else {
                    Restriction::Interval {
                        lo: f64::NEG_INFINITY,
                        hi: *value,
                        lo_closed: true,
                        hi_closed: *inclusive,
                    }
                };
                r.intersect(&side)
            }
            (Split::Threshold { value, inclusive, .. }, Restriction::Ints { lo, hi }) => {
                let left_hi = if *inclusive {
                    value.floor() as i64
                } else {
                    value.ceil() as i64 - 1
                };
                if right {
                    Restriction::Ints {
                        lo: (*lo).max(left_hi + 1),
                        hi: *hi,
                    }
                } else {
                    Restriction::Ints {
                        lo: *lo,
                        hi: (*hi).min(left_hi),
                    }
                }
            }
            (Split::Subset { right: set, .. }, Restriction::Subset(s)) => {
                if right {
                    Restriction::Subset(s.intersection(set))
                } else {
                    Restriction::Subset(s.difference(set))
                }
            }
            _ => panic!("split kind does not match feature kind"),
        }
    }

    pub fn child_support(&self, parent: &Support, right: bool) -> Support {
        let f = self.feature();
        parent.with_part(f, self.restrict(parent.part(f), right))
    }

    /// Human-readable predicate for the right (true) branch.
    pub fn describe(&self, schema: &Schema) -> String {
        let f = schema.feature(self.feature());
        match self {
            Split::Threshold { value, inclusive, .. } => {
                format!("{} {} {}", f.name, if *inclusive { ">" } else { ">=" }, value)
            }
            Split::Subset { right, .. } => {
                let names: Vec<String> = match &f.domain {
                    FeatureDomain::Categorical { modalities } => {
                        right.iter().map(|i| modalities[i].clone()).collect()
                    }
                    _ => right.iter().map(|i| i.to_string()).collect(),
                };
                format!("{} in {{{}}}", f.name, names.join(","))
            }
        }
    }

    /// Value written in history files: the threshold, or the right-branch
    /// modalities joined by `|`.
    pub fn value_label(&self, schema: &Schema) -> String {
        match self {
            Split::Threshold { value, inclusive, .. } => {
                if *inclusive {
                    format!("<={value}")
                } else {
                    format!("<{value}")
                }
            }
            Split::Subset { right, .. } => match &schema.domain(self.feature()) {
                FeatureDomain::Categorical { modalities } => right
                    .iter()
                    .map(|i| modalities[i].as_str())
                    .collect::<Vec<_>>()
                    .join("|"),
                _ => String::new(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    Leaf,
    Internal {
        split: Split,
        left: NodeId,
        right: NodeId,
        /// p_R[X_right | X_node], the arc probability used in EOGT mode.
        p_right: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub parent: Option<NodeId>,
    pub depth: usize,
    pub support: Support,
    /// Training rows compatible with the node's support.
    pub count: usize,
    pub kind: NodeKind,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf)
    }
}

/// Binary tree stored as an arena; node 0 is the root.
#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn root_only(schema: &Schema) -> Self {
        Tree {
            nodes: vec![Node {
                parent: None,
                depth: 0,
                support: Support::full(schema),
                count: 0,
                kind: NodeKind::Leaf,
            }],
        }
    }

    pub const ROOT: NodeId = 0;

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].is_leaf())
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves().count()
    }

    pub fn children(&self, id: NodeId) -> Option<(NodeId, NodeId)> {
        match &self.nodes[id].kind {
            NodeKind::Internal { left, right, .. } => Some((*left, *right)),
            NodeKind::Leaf => None,
        }
    }

    pub fn split_of(&self, id: NodeId) -> Option<&Split> {
        match &self.nodes[id].kind {
            NodeKind::Internal { split, .. } => Some(split),
            NodeKind::Leaf => None,
        }
    }

    /// Cached support of `node`.
    pub fn support_of_node(&self, node: NodeId) -> Result<&Support> {
        self.nodes
            .get(node)
            .map(|n| &n.support)
            .ok_or_else(|| Error::InvalidArgument(format!("node {node} not in tree")))
    }

    /// Root-to-node path, root first.
    pub fn path(&self, node: NodeId) -> Vec<NodeId> {
        let mut path = vec![node];
        let mut cur = node;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Replace a leaf by a stump. Returns `(left, right)`. Counts of the new
    /// children are zero until the forest is (re)bound to data.
    pub fn split_leaf(&mut self, leaf: NodeId, split: Split) -> Result<(NodeId, NodeId)> {
        let node = self
            .nodes
            .get(leaf)
            .ok_or_else(|| Error::InvalidArgument(format!("node {leaf} not in tree")))?;
        if !node.is_leaf() {
            return Err(Error::InvalidArgument(format!("node {leaf} is not a leaf")));
        }
        let f = split.feature();
        if f >= node.support.dim() {
            return Err(Error::InvalidArgument(format!("feature {f} out of range")));
        }
        let left_support = split.child_support(&node.support, false);
        let right_support = split.child_support(&node.support, true);
        if left_support.is_empty() || right_support.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "split does not cut the support of node {leaf}"
            )));
        }
        let depth = node.depth + 1;
        let left = self.nodes.len();
        let right = left + 1;
        for support in [left_support, right_support] {
            self.nodes.push(Node {
                parent: Some(leaf),
                depth,
                support,
                count: 0,
                kind: NodeKind::Leaf,
            });
        }
        self.nodes[leaf].kind = NodeKind::Internal {
            split,
            left,
            right,
            p_right: f64::NAN,
        };
        Ok((left, right))
    }

    /// Descend to the leaf containing a complete observation.
    pub fn leaf_of(&self, x: &[f64]) -> NodeId {
        let mut cur = Self::ROOT;
        while let NodeKind::Internal { split, left, right, .. } = &self.nodes[cur].kind {
            cur = if split.goes_right(x[split.feature()]) { *right } else { *left };
        }
        cur
    }

    pub(crate) fn set_counts(&mut self, counts: &[usize]) {
        for (n, &c) in self.nodes.iter_mut().zip(counts) {
            n.count = c;
        }
        self.annotate_arcs();
    }

    fn annotate_arcs(&mut self) {
        for i in 0..self.nodes.len() {
            if let NodeKind::Internal { right, .. } = self.nodes[i].kind {
                let p = if self.nodes[i].count == 0 {
                    f64::NAN
                } else {
                    self.nodes[right].count as f64 / self.nodes[i].count as f64
                };
                if let NodeKind::Internal { p_right, .. } = &mut self.nodes[i].kind {
                    *p_right = p;
                }
            }
        }
    }

    pub fn p_right(&self, node: NodeId) -> Option<f64> {
        match self.nodes[node].kind {
            NodeKind::Internal { p_right, .. } => Some(p_right),
            NodeKind::Leaf => None,
        }
    }

    /// One line per node, indented by depth.
    pub fn dump(&self, schema: &Schema) -> String {
        let mut out = String::new();
        self.dump_rec(schema, Self::ROOT, &mut out);
        out
    }

    fn dump_rec(&self, schema: &Schema, id: NodeId, out: &mut String) {
        let n = &self.nodes[id];
        let pad = "  ".repeat(n.depth);
        match &n.kind {
            NodeKind::Leaf => out.push_str(&format!("{pad}leaf #{id} (n={})\n", n.count)),
            NodeKind::Internal {
                split,
                left,
                right,
                p_right,
            } => {
                out.push_str(&format!(
                    "{pad}#{id} [{}] p={p_right:.4} (n={})\n",
                    split.describe(schema),
                    n.count
                ));
                self.dump_rec(schema, *right, out);
                self.dump_rec(schema, *left, out);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Gf,
    Eogt,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gf" => Ok(Mode::Gf),
            "eogt" => Ok(Mode::Eogt),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Gf => "gf",
            Mode::Eogt => "eogt",
        })
    }
}

/// Training-data binding of a GF: per tree, per node, the compatible rows.
#[derive(Clone, Debug)]
pub struct Binding {
    data: Arc<Dataset>,
    node_rows: Vec<Vec<RowSet>>,
    csv_hash: u64,
    has_missing: bool,
}

/// One element of the partition induced by the leaves of all trees.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionElement {
    /// Leaf reached in each tree.
    pub leaves: Vec<NodeId>,
    pub support: Support,
    /// Training rows in the element (GF mode only).
    pub count: Option<usize>,
    pub uniform_mass: f64,
}

impl PartitionElement {
    /// Sum over trees of the depths of the element's leaves.
    pub fn depth(&self, forest: &GenerativeForest) -> usize {
        self.leaves
            .iter()
            .zip(forest.trees())
            .map(|(&l, t)| t.node(l).depth)
            .sum()
    }
}

/// Model density at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Density {
    pub value: f64,
    /// The point lies in a zero-length region; `value` is then the mass per
    /// unit of the remaining (non-degenerate) features.
    pub point_mass: bool,
}

#[derive(Clone, Debug)]
pub struct GenerativeForest {
    schema: Schema,
    prior: f64,
    loss: Loss,
    trees: Vec<Tree>,
    binding: Option<Binding>,
}

impl GenerativeForest {
    /// GF bound to `data`. Node counts, row sets and arc probabilities are
    /// computed from the data.
    pub fn new_gf(data: Arc<Dataset>, trees: Vec<Tree>, prior: f64, loss: Loss) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::InvalidArgument("a forest needs at least one tree".into()));
        }
        if data.m() == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut forest = GenerativeForest {
            schema: data.schema().clone(),
            prior,
            loss,
            trees,
            binding: None,
        };
        let node_rows: Vec<Vec<RowSet>> = forest.trees.iter().map(|t| node_row_sets(t, &data)).collect();
        for (tree, rows) in forest.trees.iter_mut().zip(&node_rows) {
            let counts: Vec<usize> = rows.iter().map(RowSet::count).collect();
            tree.set_counts(&counts);
        }
        let csv_hash = data.content_hash();
        forest.binding = Some(Binding {
            has_missing: data.missing_count() > 0,
            data,
            node_rows,
            csv_hash,
        });
        Ok(forest)
    }

    /// EOGT from trees whose node counts are already set.
    pub fn new_eogt(schema: Schema, mut trees: Vec<Tree>, prior: f64, loss: Loss) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::InvalidArgument("a forest needs at least one tree".into()));
        }
        for t in &mut trees {
            t.annotate_arcs();
        }
        Ok(GenerativeForest {
            schema,
            prior,
            loss,
            trees,
            binding: None,
        })
    }

    /// `t` root-only trees bound to `data`.
    pub fn root_only(data: Arc<Dataset>, t: usize, prior: f64, loss: Loss) -> Result<Self> {
        let trees = (0..t).map(|_| Tree::root_only(data.schema())).collect();
        Self::new_gf(data, trees, prior, loss)
    }

    pub fn mode(&self) -> Mode {
        if self.binding.is_some() {
            Mode::Gf
        } else {
            Mode::Eogt
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn prior(&self) -> f64 {
        self.prior
    }

    pub fn loss(&self) -> Loss {
        self.loss
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn tree(&self, t: usize) -> &Tree {
        &self.trees[t]
    }

    pub fn dataset(&self) -> Option<&Dataset> {
        self.binding.as_ref().map(|b| b.data.as_ref())
    }

    pub fn training_rows(&self) -> Option<usize> {
        self.binding.as_ref().map(|b| b.data.m())
    }

    pub fn csv_hash(&self) -> Option<u64> {
        self.binding.as_ref().map(|b| b.csv_hash)
    }

    pub fn node_rows(&self, tree: usize, node: NodeId) -> Option<&RowSet> {
        self.binding.as_ref().map(|b| &b.node_rows[tree][node])
    }

    pub fn total_nodes(&self) -> usize {
        self.trees.iter().map(Tree::len).sum()
    }

    /// Every non-empty intersection of one leaf per tree, built by the
    /// sequential chop: descend tree 1 from the full domain, then tree 2 from
    /// each reached leaf support, and so on.
    pub fn enumerate_partition(&self, cap: usize) -> Result<Vec<PartitionElement>> {
        let mut out = Vec::new();
        let rows = self.binding.as_ref().map(|b| RowSet::full(b.data.m()));
        let mut leaves = Vec::with_capacity(self.trees.len());
        self.chop(0, Tree::ROOT, Support::full(&self.schema), rows, &mut leaves, &mut out, cap)?;
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn chop(
        &self,
        t: usize,
        node: NodeId,
        support: Support,
        rows: Option<RowSet>,
        leaves: &mut Vec<NodeId>,
        out: &mut Vec<PartitionElement>,
        cap: usize,
    ) -> Result<()> {
        let tree = &self.trees[t];
        match tree.children(node) {
            Some((l, r)) => {
                for child in [l, r] {
                    if let Some(s) = support.intersect_unchecked(&tree.node(child).support) {
                        self.chop(t, child, s, rows.clone(), leaves, out, cap)?;
                    }
                }
            }
            None => {
                let rows = rows.map(|mut r| {
                    r.intersect_with(self.node_rows(t, node).expect("bound"));
                    r
                });
                leaves.push(node);
                if t + 1 == self.trees.len() {
                    if out.len() >= cap {
                        return Err(Error::PartitionTooLarge(cap));
                    }
                    out.push(PartitionElement {
                        leaves: leaves.clone(),
                        uniform_mass: measure::uniform_mass(&self.schema, &support),
                        count: rows.as_ref().map(RowSet::count),
                        support,
                    });
                } else {
                    self.chop(t + 1, Tree::ROOT, support, rows, leaves, out, cap)?;
                }
                leaves.pop();
            }
        }
        Ok(())
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.schema.len() {
            return Err(Error::SchemaMismatch(format!(
                "observation has {} values, schema has {}",
                x.len(),
                self.schema.len()
            )));
        }
        for (f, &v) in x.iter().enumerate() {
            if !self.schema.domain(f).contains(v) {
                return Err(Error::OutOfDomain {
                    feature: self.schema.feature(f).name.clone(),
                    value: v.to_string(),
                });
            }
        }
        Ok(())
    }

    /// The partition element containing a complete, in-domain observation.
    pub fn partition_element_of(&self, x: &[f64]) -> Result<PartitionElement> {
        self.check_point(x)?;
        let leaves: Vec<NodeId> = self.trees.iter().map(|t| t.leaf_of(x)).collect();
        let mut support = Support::full(&self.schema);
        for (t, &l) in self.trees.iter().zip(&leaves) {
            support = support
                .intersect_unchecked(&t.node(l).support)
                .expect("a point lies in every leaf it reaches");
        }
        let count = self.binding.as_ref().map(|b| {
            let mut rows = RowSet::full(b.data.m());
            for (t, &l) in leaves.iter().enumerate() {
                rows.intersect_with(&b.node_rows[t][l]);
            }
            rows.count()
        });
        Ok(PartitionElement {
            leaves,
            uniform_mass: measure::uniform_mass(&self.schema, &support),
            count,
            support,
        })
    }

    /// Whether the bound training data has missing values.
    pub fn has_missing(&self) -> bool {
        self.binding.as_ref().is_some_and(|b| b.has_missing)
    }

    /// Training rows of `rows` that fall in `s`, each missing value spread
    /// uniformly over its feature's domain. Equals the row count when no
    /// value is missing. GF mode only.
    pub fn spread_count(&self, rows: &RowSet, s: &Support) -> f64 {
        let b = self.binding.as_ref().expect("spread counts need the training data");
        if !b.has_missing {
            return rows.count() as f64;
        }
        rows.iter().map(|r| measure::spread_weight(&self.schema, b.data.row(r), s)).sum()
    }

    /// Model probability of a partition element: its empirical mass in GF
    /// mode (missing values spread), the product of approximate branch
    /// probabilities in EOGT mode.
    pub fn element_probability(&self, e: &PartitionElement) -> f64 {
        match (&self.binding, e.count) {
            (Some(b), Some(c)) if !b.has_missing => c as f64 / b.data.m() as f64,
            (Some(b), Some(_)) => {
                let mut rows = RowSet::full(b.data.m());
                for (t, &l) in e.leaves.iter().enumerate() {
                    rows.intersect_with(&b.node_rows[t][l]);
                }
                self.spread_count(&rows, &e.support) / b.data.m() as f64
            }
            _ => sampler::sequence_probability(self, &e.leaves),
        }
    }

    /// Density at `x`: element probability over element volume.
    pub fn density(&self, x: &[f64]) -> Result<Density> {
        let e = self.partition_element_of(x)?;
        let p = self.element_probability(&e);
        let (vol, point_mass) = measure::volume(&e.support);
        Ok(Density {
            value: if vol > 0.0 { p / vol } else { p },
            point_mass,
        })
    }

    /// Convert to an ensemble of generative trees: arcs carry
    /// p_R[X_right | X_node] and the data binding is dropped. Idempotent.
    pub fn to_eogt(&self) -> Result<GenerativeForest> {
        let mut trees = self.trees.clone();
        for t in &mut trees {
            for n in 0..t.len() {
                if matches!(t.nodes[n].kind, NodeKind::Internal { .. }) {
                    assert!(t.nodes[n].count > 0, "internal node with zero training mass");
                }
            }
            t.annotate_arcs();
        }
        if self.has_missing() {
            let b = self.binding.as_ref().expect("GF");
            for (ti, t) in trees.iter_mut().enumerate() {
                for n in 0..t.len() {
                    let NodeKind::Internal { left, right, .. } = t.nodes[n].kind else {
                        continue;
                    };
                    let w = |c: NodeId| self.spread_count(&b.node_rows[ti][c], &t.nodes[c].support);
                    let (wl, wr) = (w(left), w(right));
                    if let NodeKind::Internal { p_right, .. } = &mut t.nodes[n].kind {
                        *p_right = wr / (wl + wr);
                    }
                }
            }
        }
        Ok(GenerativeForest {
            schema: self.schema.clone(),
            prior: self.prior,
            loss: self.loss,
            trees,
            binding: None,
        })
    }

    /// Σ over partition elements of model probability times summed leaf depth.
    pub fn expected_depth(&self) -> Result<f64> {
        Ok(self
            .enumerate_partition(DEFAULT_PARTITION_CAP)?
            .iter()
            .map(|e| self.element_probability(e) * e.depth(self) as f64)
            .sum())
    }

    /// Leaf counts per tree.
    pub fn leaf_counts(&self) -> Vec<usize> {
        self.trees.iter().map(Tree::num_leaves).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_model_string())?;
        Ok(())
    }

    /// Versioned JSON model text. Deterministic for a given forest.
    pub fn to_model_string(&self) -> String {
        let file = ModelFile::from_forest(self);
        let mut s = serde_json::to_string_pretty(&file).expect("model serialisation");
        s.push('\n');
        s
    }

    /// Load a model. GF models need their training data, whose content hash
    /// must match the one recorded at save time.
    pub fn load(path: impl AsRef<Path>, data: Option<Arc<Dataset>>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_model_str(&text, data)
    }

    pub fn from_model_str(text: &str, data: Option<Arc<Dataset>>) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::MalformedModel(e.to_string()))?;
        file.into_forest(data)
    }

    /// True when the stored model only needs arc probabilities to run.
    pub fn model_mode(text: &str) -> Result<Mode> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            mode: Mode,
        }
        let h: Header = serde_json::from_str(text).map_err(|e| Error::MalformedModel(e.to_string()))?;
        if h.format != MODEL_FORMAT {
            return Err(Error::MalformedModel(format!("unknown format `{}`", h.format)));
        }
        Ok(h.mode)
    }
}

/// Row sets of every node, computed top-down with wildcard semantics.
fn node_row_sets(tree: &Tree, data: &Dataset) -> Vec<RowSet> {
    let m = data.m();
    let mut sets = vec![RowSet::empty(m); tree.len()];
    sets[Tree::ROOT] = RowSet::full(m);
    let mut stack = vec![Tree::ROOT];
    while let Some(id) = stack.pop() {
        if let NodeKind::Internal { split, left, right, .. } = &tree.node(id).kind {
            let f = split.feature();
            let (mut l, mut r) = (RowSet::empty(m), RowSet::empty(m));
            for row in sets[id].iter() {
                match data.row(row)[f] {
                    None => {
                        l.insert(row);
                        r.insert(row);
                    }
                    Some(v) if split.goes_right(v) => r.insert(row),
                    Some(_) => l.insert(row),
                }
            }
            sets[*left] = l;
            sets[*right] = r;
            stack.push(*left);
            stack.push(*right);
        }
    }
    sets
}

const MODEL_FORMAT: &str = "gforest-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    mode: Mode,
    prior: f64,
    loss: Loss,
    schema: Schema,
    trees: Vec<TreeRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainingRecord>,
}

#[derive(Serialize, Deserialize)]
struct TreeRecord {
    nodes: Vec<NodeRecord>,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    children: Option<[NodeId; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p_right: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TrainingRecord {
    rows: usize,
    csv_hash: String,
    /// Per tree: `(leaf, space-separated row ids)`.
    leaf_rows: Vec<Vec<(NodeId, String)>>,
}

impl ModelFile {
    fn from_forest(forest: &GenerativeForest) -> Self {
        let trees = forest
            .trees
            .iter()
            .map(|t| TreeRecord {
                nodes: t
                    .nodes
                    .iter()
                    .map(|n| match &n.kind {
                        NodeKind::Leaf => NodeRecord {
                            count: n.count,
                            split: None,
                            children: None,
                            p_right: None,
                        },
                        NodeKind::Internal {
                            split,
                            left,
                            right,
                            p_right,
                        } => NodeRecord {
                            count: n.count,
                            split: Some(split.clone()),
                            children: Some([*left, *right]),
                            p_right: Some(*p_right),
                        },
                    })
                    .collect(),
            })
            .collect();
        let training = forest.binding.as_ref().map(|b| TrainingRecord {
            rows: b.data.m(),
            csv_hash: format!("{:016x}", b.csv_hash),
            leaf_rows: forest
                .trees
                .iter()
                .enumerate()
                .map(|(ti, t)| {
                    t.leaves()
                        .map(|l| {
                            let ids: Vec<String> = b.node_rows[ti][l].iter().map(|r| r.to_string()).collect();
                            (l, ids.join(" "))
                        })
                        .collect()
                })
                .collect(),
        });
        ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            mode: forest.mode(),
            prior: forest.prior,
            loss: forest.loss,
            schema: forest.schema.clone(),
            trees,
            training,
        }
    }

    fn into_forest(self, data: Option<Arc<Dataset>>) -> Result<GenerativeForest> {
        if self.format != MODEL_FORMAT {
            return Err(Error::MalformedModel(format!("unknown format `{}`", self.format)));
        }
        if self.version != MODEL_VERSION {
            return Err(Error::MalformedModel(format!("unsupported version {}", self.version)));
        }
        if self.trees.is_empty() {
            return Err(Error::MalformedModel("no trees".into()));
        }
        // Validates names, modalities and ranges.
        let schema = Schema::new(self.schema.features().to_vec()).map_err(|e| Error::MalformedModel(e.to_string()))?;
        let mut trees = Vec::with_capacity(self.trees.len());
        for rec in &self.trees {
            trees.push(rebuild_tree(&schema, rec)?);
        }
        match self.mode {
            Mode::Eogt => {
                for t in &trees {
                    for n in t.nodes() {
                        if let NodeKind::Internal { p_right, .. } = n.kind {
                            if !(0.0..=1.0).contains(&p_right) {
                                return Err(Error::MalformedModel(format!("arc probability {p_right} outside [0, 1]")));
                            }
                        }
                    }
                }
                Ok(GenerativeForest {
                    schema,
                    prior: self.prior,
                    loss: self.loss,
                    trees,
                    binding: None,
                })
            }
            Mode::Gf => {
                let training = self
                    .training
                    .ok_or_else(|| Error::MalformedModel("GF model without training record".into()))?;
                let data = data.ok_or(Error::WrongMode("a GF model needs its training CSV"))?;
                let expected = u64::from_str_radix(&training.csv_hash, 16)
                    .map_err(|_| Error::MalformedModel("bad csv hash".into()))?;
                let found = data.content_hash();
                if found != expected || data.schema() != &schema || data.m() != training.rows {
                    return Err(Error::HashMismatch { expected, found });
                }
                if training.leaf_rows.len() != trees.len() {
                    return Err(Error::MalformedModel("leaf row index does not match trees".into()));
                }
                let m = data.m();
                let mut node_rows = Vec::with_capacity(trees.len());
                for (t, leaves) in trees.iter().zip(&training.leaf_rows) {
                    let mut sets = vec![RowSet::empty(m); t.len()];
                    for (leaf, ids) in leaves {
                        if *leaf >= t.len() || !t.node(*leaf).is_leaf() {
                            return Err(Error::MalformedModel(format!("row index names non-leaf {leaf}")));
                        }
                        for tok in ids.split_whitespace() {
                            let r: usize = tok.parse().map_err(|_| Error::MalformedModel(format!("bad row id `{tok}`")))?;
                            if r >= m {
                                return Err(Error::MalformedModel(format!("row id {r} out of range")));
                            }
                            sets[*leaf].insert(r);
                        }
                    }
                    // Internal nodes: union of children, filled bottom-up.
                    for id in (0..t.len()).rev() {
                        if let Some((l, r)) = t.children(id) {
                            let mut u = sets[l].clone();
                            u.union_with(&sets[r]);
                            sets[id] = u;
                        }
                    }
                    node_rows.push(sets);
                }
                Ok(GenerativeForest {
                    schema,
                    prior: self.prior,
                    loss: self.loss,
                    trees,
                    binding: Some(Binding {
                        has_missing: data.missing_count() > 0,
                        data,
                        node_rows,
                        csv_hash: expected,
                    }),
                })
            }
        }
    }
}

fn rebuild_tree(schema: &Schema, rec: &TreeRecord) -> Result<Tree> {
    let n = rec.nodes.len();
    if n == 0 {
        return Err(Error::MalformedModel("empty tree".into()));
    }
    let mut nodes: Vec<Option<Node>> = vec![None; n];
    nodes[0] = Some(Node {
        parent: None,
        depth: 0,
        support: Support::full(schema),
        count: rec.nodes[0].count,
        kind: NodeKind::Leaf,
    });
    let mut stack = vec![0usize];
    while let Some(id) = stack.pop() {
        let r = &rec.nodes[id];
        let (split, children) = match (&r.split, r.children) {
            (None, None) => continue,
            (Some(s), Some(c)) => (s.clone(), c),
            _ => return Err(Error::MalformedModel(format!("node {id} has a split without children or vice versa"))),
        };
        let parent = nodes[id].clone().expect("visited");
        if split.feature() >= schema.len() {
            return Err(Error::MalformedModel(format!("node {id} splits unknown feature")));
        }
        let kind_ok = matches!(
            (&split, schema.domain(split.feature())),
            (Split::Threshold { .. }, FeatureDomain::Real { .. } | FeatureDomain::Integer { .. })
                | (Split::Subset { .. }, FeatureDomain::Categorical { .. })
        );
        if !kind_ok {
            return Err(Error::MalformedModel(format!("node {id} split kind does not match its feature")));
        }
        for (side, &c) in children.iter().enumerate() {
            if c >= n || c == 0 || nodes[c].is_some() {
                return Err(Error::MalformedModel(format!("bad child index {c} at node {id}")));
            }
            nodes[c] = Some(Node {
                parent: Some(id),
                depth: parent.depth + 1,
                support: split.child_support(&parent.support, side == 1),
                count: rec.nodes[c].count,
                kind: NodeKind::Leaf,
            });
            stack.push(c);
        }
        nodes[id].as_mut().expect("visited").kind = NodeKind::Internal {
            split,
            left: children[0],
            right: children[1],
            p_right: r.p_right.unwrap_or(f64::NAN),
        };
    }
    let nodes: Option<Vec<Node>> = nodes.into_iter().collect();
    let nodes = nodes.ok_or_else(|| Error::MalformedModel("unreachable nodes in tree".into()))?;
    Ok(Tree { nodes })
}
