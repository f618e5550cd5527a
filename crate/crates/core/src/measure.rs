//! Supports (axis-aligned sub-domains), the empirical measure R, the uniform
//! product measure U, and the strictly proper losses whose Bayes risks drive
//! training.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureDomain, Schema};
use crate::error::{Error, Result};
use crate::forest::GenerativeForest;

/// Subset of the modality indices `0..len` of a categorical feature.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CatSet {
    words: Vec<u64>,
    len: usize,
}

impl CatSet {
    pub fn empty(len: usize) -> Self {
        CatSet {
            words: vec![0; len.div_ceil(64).max(1)],
            len,
        }
    }

    pub fn full(len: usize) -> Self {
        Self::from_indices(len, 0..len)
    }

    pub fn from_indices(len: usize, items: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::empty(len);
        for i in items {
            s.insert(i);
        }
        s
    }

    pub fn universe(&self) -> usize {
        self.len
    }

    pub fn insert(&mut self, i: usize) {
        assert!(i < self.len, "modality {i} outside 0..{}", self.len);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.len && self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn intersection(&self, other: &CatSet) -> CatSet {
        CatSet {
            words: self.words.iter().zip(&other.words).map(|(a, b)| a & b).collect(),
            len: self.len,
        }
    }

    pub fn difference(&self, other: &CatSet) -> CatSet {
        CatSet {
            words: self.words.iter().zip(&other.words).map(|(a, b)| a & !b).collect(),
            len: self.len,
        }
    }

    pub fn intersection_count(&self, other: &CatSet) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn is_subset_of(&self, other: &CatSet) -> bool {
        self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&i| self.contains(i))
    }
}

/// Restriction of one feature's domain.
///
/// Real intervals carry explicit end-point closure so that the two children
/// of a threshold split are disjoint. Integer ranges are inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Restriction {
    Interval {
        lo: f64,
        hi: f64,
        lo_closed: bool,
        hi_closed: bool,
    },
    Ints {
        lo: i64,
        hi: i64,
    },
    Subset(CatSet),
}

impl Restriction {
    pub fn full(domain: &FeatureDomain) -> Self {
        match domain {
            FeatureDomain::Real { lo, hi } => Restriction::Interval {
                lo: *lo,
                hi: *hi,
                lo_closed: true,
                hi_closed: true,
            },
            FeatureDomain::Integer { lo, hi } => Restriction::Ints { lo: *lo, hi: *hi },
            FeatureDomain::Categorical { modalities } => Restriction::Subset(CatSet::full(modalities.len())),
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            Restriction::Interval {
                lo,
                hi,
                lo_closed,
                hi_closed,
            } => lo > hi || (lo == hi && !(*lo_closed && *hi_closed)),
            Restriction::Ints { lo, hi } => lo > hi,
            Restriction::Subset(s) => s.is_empty(),
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        match self {
            Restriction::Interval {
                lo,
                hi,
                lo_closed,
                hi_closed,
            } => {
                (if *lo_closed { v >= *lo } else { v > *lo }) && (if *hi_closed { v <= *hi } else { v < *hi })
            }
            Restriction::Ints { lo, hi } => v >= *lo as f64 && v <= *hi as f64,
            Restriction::Subset(s) => v >= 0.0 && s.contains(v as usize),
        }
    }

    /// Lebesgue length, integer count or modality count.
    pub fn measure(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        match self {
            Restriction::Interval { lo, hi, .. } => hi - lo,
            Restriction::Ints { lo, hi } => (hi - lo + 1) as f64,
            Restriction::Subset(s) => s.count() as f64,
        }
    }

    pub fn intersect(&self, other: &Restriction) -> Restriction {
        match (self, other) {
            (
                Restriction::Interval {
                    lo: a_lo,
                    hi: a_hi,
                    lo_closed: a_lc,
                    hi_closed: a_hc,
                },
                Restriction::Interval {
                    lo: b_lo,
                    hi: b_hi,
                    lo_closed: b_lc,
                    hi_closed: b_hc,
                },
            ) => {
                let (lo, lo_closed) = if a_lo > b_lo {
                    (*a_lo, *a_lc)
                } else if b_lo > a_lo {
                    (*b_lo, *b_lc)
                } else {
                    (*a_lo, *a_lc && *b_lc)
                };
                let (hi, hi_closed) = if a_hi < b_hi {
                    (*a_hi, *a_hc)
                } else if b_hi < a_hi {
                    (*b_hi, *b_hc)
                } else {
                    (*a_hi, *a_hc && *b_hc)
                };
                Restriction::Interval {
                    lo,
                    hi,
                    lo_closed,
                    hi_closed,
                }
            }
            (Restriction::Ints { lo: a, hi: b }, Restriction::Ints { lo: c, hi: d }) => Restriction::Ints {
                lo: *a.max(c),
                hi: *b.min(d),
            },
            (Restriction::Subset(a), Restriction::Subset(b)) => Restriction::Subset(a.intersection(b)),
            _ => panic!("intersecting restrictions of different feature kinds"),
        }
    }

    pub fn is_subset_of(&self, other: &Restriction) -> bool {
        if self.is_empty() {
            return true;
        }
        match (self, other) {
            (Restriction::Subset(a), Restriction::Subset(b)) => a.is_subset_of(b),
            _ => &self.intersect(other) == self,
        }
    }
}

/// Product of per-feature restrictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Support {
    parts: Vec<Restriction>,
}

impl Support {
    pub fn full(schema: &Schema) -> Self {
        Support {
            parts: schema.features().iter().map(|f| Restriction::full(&f.domain)).collect(),
        }
    }

    pub fn from_parts(parts: Vec<Restriction>) -> Self {
        Support { parts }
    }

    pub fn parts(&self) -> &[Restriction] {
        &self.parts
    }

    pub fn part(&self, feature: usize) -> &Restriction {
        &self.parts[feature]
    }

    pub fn dim(&self) -> usize {
        self.parts.len()
    }

    pub fn with_part(&self, feature: usize, r: Restriction) -> Support {
        let mut out = self.clone();
        out.parts[feature] = r;
        out
    }

    pub fn is_empty(&self) -> bool {
        self.parts.iter().any(Restriction::is_empty)
    }

    /// Wildcard membership: missing values match every restriction.
    pub fn contains(&self, row: &[Option<f64>]) -> bool {
        self.parts
            .iter()
            .zip(row)
            .all(|(r, v)| v.is_none_or(|v| r.contains(v)))
    }

    pub fn contains_point(&self, x: &[f64]) -> bool {
        self.parts.iter().zip(x).all(|(r, &v)| r.contains(v))
    }

    pub fn is_subset_of(&self, other: &Support) -> bool {
        self.is_empty() || self.parts.iter().zip(&other.parts).all(|(a, b)| a.is_subset_of(b))
    }

    /// Per-feature intersection, `None` when the result is empty.
    pub fn intersect(&self, other: &Support) -> Result<Option<Support>> {
        if self.dim() != other.dim() {
            return Err(Error::SchemaMismatch(format!(
                "supports of dimension {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        for (a, b) in self.parts.iter().zip(&other.parts) {
            if std::mem::discriminant(a) != std::mem::discriminant(b) {
                return Err(Error::SchemaMismatch("restrictions of different kinds".into()));
            }
        }
        Ok(self.intersect_unchecked(other))
    }

    pub(crate) fn intersect_unchecked(&self, other: &Support) -> Option<Support> {
        let parts: Vec<Restriction> = self.parts.iter().zip(&other.parts).map(|(a, b)| a.intersect(b)).collect();
        let s = Support { parts };
        (!s.is_empty()).then_some(s)
    }
}

/// Fraction of rows compatible with `s` (missing values are wildcards).
pub fn empirical_mass(ds: &Dataset, s: &Support) -> f64 {
    if ds.m() == 0 {
        return 0.0;
    }
    let n = ds.rows().iter().filter(|r| s.contains(r)).count();
    n as f64 / ds.m() as f64
}

/// Share of one row that falls in `s` when each of its missing values is
/// spread uniformly over the feature's domain. Rows without missing values
/// weigh 1 inside `s`; the caller is expected to pass compatible rows only.
pub fn spread_weight(schema: &Schema, row: &[Option<f64>], s: &Support) -> f64 {
    row.iter()
        .enumerate()
        .filter(|(_, v)| v.is_none())
        .map(|(f, _)| restriction_ratio(schema.domain(f), s.part(f)))
        .product()
}

/// Spread mass of `s`: compatible rows weighted by [`spread_weight`], over m.
pub fn spread_mass(ds: &Dataset, s: &Support) -> f64 {
    if ds.m() == 0 {
        return 0.0;
    }
    let w: f64 = ds.rows().iter().filter(|r| s.contains(r)).map(|r| spread_weight(ds.schema(), r, s)).sum();
    w / ds.m() as f64
}

/// Uniform-measure ratio of one restriction to its full domain. A real
/// feature with a zero-length domain contributes 1 when the restriction is
/// non-empty.
pub fn restriction_ratio(domain: &FeatureDomain, r: &Restriction) -> f64 {
    if r.is_empty() {
        return 0.0;
    }
    let full = Restriction::full(domain).measure();
    if full == 0.0 {
        1.0
    } else {
        r.measure() / full
    }
}

/// Mass of `s` under the uniform product measure over the schema's domain.
pub fn uniform_mass(schema: &Schema, s: &Support) -> f64 {
    schema
        .features()
        .iter()
        .zip(s.parts())
        .map(|(f, r)| restriction_ratio(&f.domain, r))
        .product()
}

/// Volume of a support in feature units: product of lengths, integer counts
/// and modality counts. Real features of zero length (constant columns, or
/// point restrictions) are left out of the product and reported through the
/// second component.
pub fn volume(s: &Support) -> (f64, bool) {
    let mut vol = 1.0;
    let mut point = false;
    for r in s.parts() {
        let m = r.measure();
        match r {
            Restriction::Interval { .. } if m == 0.0 && !r.is_empty() => point = true,
            _ => vol *= m,
        }
    }
    (vol, point)
}

/// A strictly proper loss for class probability estimation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    #[default]
    Square,
    Log,
    Matusita,
}

impl Loss {
    pub const ALL: [Loss; 3] = [Loss::Square, Loss::Log, Loss::Matusita];

    /// Partial loss ℓ₁(u) when the true class is positive.
    pub fn partial_pos(self, u: f64) -> f64 {
        match self {
            Loss::Square => (1.0 - u).powi(2),
            Loss::Log => -u.ln(),
            Loss::Matusita => ((1.0 - u) / u).sqrt(),
        }
    }

    /// Partial loss ℓ₋₁(u) when the true class is negative.
    pub fn partial_neg(self, u: f64) -> f64 {
        match self {
            Loss::Square => u * u,
            Loss::Log => -(1.0 - u).ln(),
            Loss::Matusita => (u / (1.0 - u)).sqrt(),
        }
    }

    pub fn d_partial_pos(self, u: f64) -> f64 {
        match self {
            Loss::Square => -2.0 * (1.0 - u),
            Loss::Log => -1.0 / u,
            Loss::Matusita => -0.5 / (u.powf(1.5) * (1.0 - u).sqrt()),
        }
    }

    pub fn d_partial_neg(self, u: f64) -> f64 {
        match self {
            Loss::Square => 2.0 * u,
            Loss::Log => 1.0 / (1.0 - u),
            Loss::Matusita => 0.5 / (u.sqrt() * (1.0 - u).powf(1.5)),
        }
    }

    /// Pointwise Bayes risk L̄(u). Arguments are clamped to [0, 1] to absorb
    /// rounding; use [`Loss::checked_bayes_risk`] to validate input.
    pub fn bayes_risk(self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self {
            Loss::Square => u * (1.0 - u),
            Loss::Log => {
                let h = |p: f64| if p <= 0.0 { 0.0 } else { -p * p.ln() };
                h(u) + h(1.0 - u)
            }
            Loss::Matusita => 2.0 * (u * (1.0 - u)).sqrt(),
        }
    }

    pub fn checked_bayes_risk(self, u: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::InvalidArgument(format!("Bayes risk argument {u} outside [0, 1]")));
        }
        Ok(self.bayes_risk(u))
    }

    /// Lower bound on inf (ℓ'₋₁ − ℓ'₁) over (0, 1).
    pub fn kappa(self) -> f64 {
        match self {
            Loss::Square => 2.0,
            Loss::Log | Loss::Matusita => 4.0,
        }
    }

    /// Contribution p_M · L̄(π p_R / p_M) of one cell with empirical mass
    /// `p_r` and uniform mass `p_u`; zero when p_M vanishes.
    pub fn cell_risk(self, prior: f64, p_r: f64, p_u: f64) -> f64 {
        let p_m = prior * p_r + (1.0 - prior) * p_u;
        if p_m <= 0.0 {
            0.0
        } else {
            p_m * self.bayes_risk(prior * p_r / p_m)
        }
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Loss::Square => "square",
            Loss::Log => "log",
            Loss::Matusita => "matusita",
        })
    }
}

impl FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(Loss::Square),
            "log" => Ok(Loss::Log),
            "matusita" => Ok(Loss::Matusita),
            other => Err(Error::InvalidArgument(format!("unknown loss `{other}`"))),
        }
    }
}

/// Expected Bayes risk of the real-vs-uniform task over the forest's
/// partition, using the empirical counts of the bound dataset.
pub fn poprisk(forest: &GenerativeForest, loss: Loss, prior: f64) -> Result<f64> {
    let cells = forest.enumerate_partition(crate::forest::DEFAULT_PARTITION_CAP)?;
    if forest.training_rows().is_none() {
        return Err(Error::WrongMode("poprisk needs the training data"));
    }
    Ok(cells
        .iter()
        .map(|c| loss.cell_risk(prior, forest.element_probability(c), c.uniform_mass))
        .sum())
}
