//! Tabular data: schemas with learned feature domains, datasets with missing
//! values, CSV ingestion, MCAR masking and the synthetic Gaussian domains.
//!
//! Cells are stored as `Option<f64>`. Numeric features hold their value;
//! categorical features hold the index of the modality in the feature's
//! modality list.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Categorical,
    Integer,
    Real,
}

/// Domain of one feature, learned from the training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureDomain {
    Categorical { modalities: Vec<String> },
    Integer { lo: i64, hi: i64 },
    Real { lo: f64, hi: f64 },
}

impl FeatureDomain {
    pub fn kind(&self) -> FeatureKind {
        match self {
            FeatureDomain::Categorical { .. } => FeatureKind::Categorical,
            FeatureDomain::Integer { .. } => FeatureKind::Integer,
            FeatureDomain::Real { .. } => FeatureKind::Real,
        }
    }

    pub fn is_numeric(&self) -> bool {
        !matches!(self, FeatureDomain::Categorical { .. })
    }

    pub fn contains(&self, value: f64) -> bool {
        match self {
            FeatureDomain::Categorical { modalities } => {
                value >= 0.0 && value.fract() == 0.0 && (value as usize) < modalities.len()
            }
            FeatureDomain::Integer { lo, hi } => {
                value.fract() == 0.0 && value >= *lo as f64 && value <= *hi as f64
            }
            FeatureDomain::Real { lo, hi } => value >= *lo && value <= *hi,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    pub domain: FeatureDomain,
}

/// Ordered list of named features. Order is fixed for the lifetime of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    features: Vec<Feature>,
}

impl Schema {
    pub fn new(features: Vec<Feature>) -> Result<Self> {
        for (i, f) in features.iter().enumerate() {
            if features[..i].iter().any(|g| g.name == f.name) {
                return Err(Error::SchemaMismatch(format!("duplicate feature name `{}`", f.name)));
            }
            match &f.domain {
                FeatureDomain::Categorical { modalities } => {
                    if modalities.is_empty() {
                        return Err(Error::EmptyColumn(f.name.clone()));
                    }
                    for (j, m) in modalities.iter().enumerate() {
                        if modalities[..j].contains(m) {
                            return Err(Error::SchemaMismatch(format!(
                                "duplicate modality `{m}` in `{}`",
                                f.name
                            )));
                        }
                    }
                }
                FeatureDomain::Integer { lo, hi } if lo > hi => {
                    return Err(Error::SchemaMismatch(format!("empty range for `{}`", f.name)));
                }
                FeatureDomain::Real { lo, hi } if lo.is_nan() || hi.is_nan() || lo > hi => {
                    return Err(Error::SchemaMismatch(format!("empty range for `{}`", f.name)));
                }
                _ => {}
            }
        }
        Ok(Schema { features })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &Feature {
        &self.features[i]
    }

    pub fn domain(&self, i: usize) -> &FeatureDomain {
        &self.features[i].domain
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// Render a cell as its CSV token. Reals always carry a decimal point or
    /// exponent so that re-loading keeps the column typed as Real.
    pub fn format_value(&self, feature: usize, value: Option<f64>) -> String {
        let Some(v) = value else {
            return String::new();
        };
        match &self.features[feature].domain {
            FeatureDomain::Categorical { modalities } => modalities[v as usize].clone(),
            FeatureDomain::Integer { .. } => format!("{}", v as i64),
            FeatureDomain::Real { .. } => format!("{v:?}"),
        }
    }

    /// Parse a CSV token against this schema. Numeric tokens are accepted
    /// even when outside the learned domain; callers decide whether that is
    /// an error.
    pub fn parse_value(&self, feature: usize, token: &str, missing_token: &str) -> Result<Option<f64>> {
        if token == missing_token || token.is_empty() {
            return Ok(None);
        }
        let f = &self.features[feature];
        let bad = || Error::OutOfDomain {
            feature: f.name.clone(),
            value: token.to_string(),
        };
        match &f.domain {
            FeatureDomain::Categorical { modalities } => modalities
                .iter()
                .position(|m| m == token)
                .map(|i| Some(i as f64))
                .ok_or_else(bad),
            FeatureDomain::Integer { .. } => token.parse::<i64>().map(|v| Some(v as f64)).map_err(|_| bad()),
            FeatureDomain::Real { .. } => token
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Some)
                .ok_or_else(bad),
        }
    }
}

/// Rows of optionally-missing values conforming to a [`Schema`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    schema: Schema,
    rows: Vec<Vec<Option<f64>>>,
}

impl Dataset {
    /// Build a dataset, checking arity and domain membership of every cell.
    pub fn new(schema: Schema, rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let d = schema.len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::RaggedRow {
                    row: i,
                    expected: d,
                    found: row.len(),
                });
            }
            for (f, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    if !schema.domain(f).contains(*v) {
                        return Err(Error::OutOfDomain {
                            feature: schema.feature(f).name.clone(),
                            value: v.to_string(),
                        });
                    }
                }
            }
        }
        Ok(Dataset { schema, rows })
    }

    /// Build a dataset without domain checks (e.g. held-out rows encoded with
    /// a schema learned elsewhere). Arity is still enforced.
    pub fn new_unchecked(schema: Schema, rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let d = schema.len();
        if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(Error::RaggedRow {
                row: i,
                expected: d,
                found: row.len(),
            });
        }
        Ok(Dataset { schema, rows })
    }

    pub fn empty(schema: Schema) -> Self {
        Dataset { schema, rows: Vec::new() }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    /// Number of rows.
    pub fn m(&self) -> usize {
        self.rows.len()
    }

    /// Number of features.
    pub fn d(&self) -> usize {
        self.schema.len()
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[Option<f64>] {
        &self.rows[i]
    }

    pub fn into_rows(self) -> Vec<Vec<Option<f64>>> {
        self.rows
    }

    pub fn missing_count(&self) -> usize {
        self.rows.iter().flatten().filter(|v| v.is_none()).count()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Re-learn every feature domain from this dataset's observed values.
    /// Categorical features keep only the modalities that occur, in their
    /// original relative order.
    pub fn relearn_domains(&self) -> Result<Dataset> {
        let mut features = Vec::with_capacity(self.d());
        let mut remap: Vec<Option<Vec<Option<usize>>>> = Vec::with_capacity(self.d());
        for (f, feat) in self.schema.features().iter().enumerate() {
            let observed: Vec<f64> = self.rows.iter().filter_map(|r| r[f]).collect();
            if observed.is_empty() {
                return Err(Error::EmptyColumn(feat.name.clone()));
            }
            let lo = observed.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = observed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (domain, map) = match &feat.domain {
                FeatureDomain::Categorical { modalities } => {
                    let mut present = vec![false; modalities.len()];
                    for v in &observed {
                        present[*v as usize] = true;
                    }
                    let mut map = vec![None; modalities.len()];
                    let mut kept = Vec::new();
                    for (i, m) in modalities.iter().enumerate() {
                        if present[i] {
                            map[i] = Some(kept.len());
                            kept.push(m.clone());
                        }
                    }
                    (FeatureDomain::Categorical { modalities: kept }, Some(map))
                }
                FeatureDomain::Integer { .. } => (
                    FeatureDomain::Integer {
                        lo: lo as i64,
                        hi: hi as i64,
                    },
                    None,
                ),
                FeatureDomain::Real { .. } => (FeatureDomain::Real { lo, hi }, None),
            };
            features.push(Feature {
                name: feat.name.clone(),
                domain,
            });
            remap.push(map);
        }
        let rows = self
            .rows
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(f, v)| match (&remap[f], v) {
                        (Some(map), Some(v)) => map[*v as usize].map(|i| i as f64),
                        (_, v) => *v,
                    })
                    .collect()
            })
            .collect();
        Dataset::new(Schema::new(features)?, rows)
    }

    /// Express the rows of this dataset under another schema with the same
    /// feature names and kinds, mapping categorical values by modality name.
    /// Values outside the target domain are kept (numeric) or rejected
    /// (unknown modality).
    pub fn reencode(&self, target: &Schema) -> Result<Dataset> {
        if target.len() != self.d() {
            return Err(Error::SchemaMismatch("feature count differs".into()));
        }
        let mut maps = Vec::with_capacity(self.d());
        for (a, b) in self.schema.features().iter().zip(target.features()) {
            if a.name != b.name || a.domain.kind() != b.domain.kind() {
                return Err(Error::SchemaMismatch(format!("feature `{}` vs `{}`", a.name, b.name)));
            }
            maps.push(match (&a.domain, &b.domain) {
                (FeatureDomain::Categorical { modalities: src }, FeatureDomain::Categorical { modalities: dst }) => {
                    Some(src.iter().map(|m| dst.iter().position(|n| n == m)).collect::<Vec<_>>())
                }
                _ => None,
            });
        }
        let mut rows = Vec::with_capacity(self.m());
        for row in &self.rows {
            let mut out = Vec::with_capacity(row.len());
            for (f, v) in row.iter().enumerate() {
                out.push(match (&maps[f], v) {
                    (Some(map), Some(v)) => Some(map[*v as usize].ok_or_else(|| Error::OutOfDomain {
                        feature: target.feature(f).name.clone(),
                        value: self.schema.format_value(f, Some(*v)),
                    })? as f64),
                    (_, v) => *v,
                });
            }
            rows.push(out);
        }
        Dataset::new_unchecked(target.clone(), rows)
    }

    pub fn write_csv<W: Write>(&self, writer: W, missing_token: &str) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        w.write_record(self.schema.names())?;
        for row in &self.rows {
            w.write_record(row.iter().enumerate().map(|(f, v)| match v {
                None => missing_token.to_string(),
                Some(_) => self.schema.format_value(f, *v),
            }))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, missing_token: &str) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(file, missing_token)
    }

    /// Canonical CSV rendering: header, `\n` line ends, empty missing cells.
    pub fn canonical_csv(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, "").expect("writing to memory cannot fail");
        buf
    }

    /// 64-bit FNV-1a hash of [`Dataset::canonical_csv`].
    pub fn content_hash(&self) -> u64 {
        fnv1a64(&self.canonical_csv())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Load a CSV file, inferring feature types and learning domains.
pub fn load_csv(path: impl AsRef<Path>, missing_token: &str) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file), missing_token)
}

/// Read CSV with a mandatory header row. A column is Integer when every
/// observed token parses as an integer, Real when every observed token parses
/// as a finite number, and Categorical otherwise. Empty cells and cells equal
/// to `missing_token` are missing.
pub fn read_csv<R: Read>(reader: R, missing_token: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let d = header.len();
    let mut tokens: Vec<Vec<Option<String>>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != d {
            return Err(Error::RaggedRow {
                row: i + 1,
                expected: d,
                found: rec.len(),
            });
        }
        tokens.push(
            rec.iter()
                .map(|t| (!(t.is_empty() || t == missing_token)).then(|| t.to_string()))
                .collect(),
        );
    }

    let mut features = Vec::with_capacity(d);
    for (f, name) in header.iter().enumerate() {
        let observed: Vec<&str> = tokens.iter().filter_map(|r| r[f].as_deref()).collect();
        if observed.is_empty() {
            return Err(Error::EmptyColumn(name.clone()));
        }
        let ints: Option<Vec<i64>> = observed.iter().map(|t| t.parse::<i64>().ok()).collect();
        let reals: Option<Vec<f64>> = observed
            .iter()
            .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect();
        let domain = if let Some(ints) = ints {
            FeatureDomain::Integer {
                lo: *ints.iter().min().unwrap(),
                hi: *ints.iter().max().unwrap(),
            }
        } else if let Some(reals) = reals {
            FeatureDomain::Real {
                lo: reals.iter().copied().fold(f64::INFINITY, f64::min),
                hi: reals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        } else {
            let mut modalities: Vec<String> = observed.iter().map(|t| t.to_string()).collect();
            modalities.sort();
            modalities.dedup();
            FeatureDomain::Categorical { modalities }
        };
        features.push(Feature {
            name: name.clone(),
            domain,
        });
    }
    let schema = Schema::new(features)?;
    let mut rows = Vec::with_capacity(tokens.len());
    for row in &tokens {
        let mut out = Vec::with_capacity(d);
        for (f, t) in row.iter().enumerate() {
            out.push(match t {
                None => None,
                Some(t) => schema.parse_value(f, t, missing_token)?,
            });
        }
        rows.push(out);
    }
    Dataset::new(schema, rows)
}

/// Read a CSV whose columns must match `schema` by name and order. Values
/// are encoded under `schema` without domain checks.
pub fn read_csv_with_schema<R: Read>(reader: R, schema: &Schema, missing_token: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() != schema.len() || header.iter().zip(schema.names()).any(|(a, b)| a != b) {
        return Err(Error::SchemaMismatch(format!(
            "header {:?} does not match model features {:?}",
            header,
            schema.names().collect::<Vec<_>>()
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != schema.len() {
            return Err(Error::RaggedRow {
                row: i + 1,
                expected: schema.len(),
                found: rec.len(),
            });
        }
        rows.push(
            rec.iter()
                .enumerate()
                .map(|(f, t)| schema.parse_value(f, t, missing_token))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Dataset::new_unchecked(schema.clone(), rows)
}

pub fn load_csv_with_schema(path: impl AsRef<Path>, schema: &Schema, missing_token: &str) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv_with_schema(std::io::BufReader::new(file), schema, missing_token)
}

/// Boolean cell mask with the shape of a dataset. `true` marks a cell that
/// was hidden.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    cells: Vec<Vec<bool>>,
}

impl Mask {
    pub fn new(cells: Vec<Vec<bool>>) -> Self {
        Mask { cells }
    }

    pub fn none(m: usize, d: usize) -> Self {
        Mask {
            cells: vec![vec![false; d]; m],
        }
    }

    /// Mask of the cells that are missing in `ds`.
    pub fn of_missing(ds: &Dataset) -> Self {
        Mask {
            cells: ds.rows().iter().map(|r| r.iter().map(Option::is_none).collect()).collect(),
        }
    }

    pub fn get(&self, row: usize, feature: usize) -> bool {
        self.cells[row][feature]
    }

    pub fn rows(&self) -> &[Vec<bool>] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().flatten().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.cells.len(), self.cells.first().map_or(0, Vec::len))
    }

    /// CSV of 0/1 with a header row of feature names.
    pub fn write_csv<W: Write>(&self, writer: W, schema: &Schema) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        w.write_record(schema.names())?;
        for row in &self.cells {
            w.write_record(row.iter().map(|&b| if b { "1" } else { "0" }))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let d = rdr.headers()?.len();
        let mut cells = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != d {
                return Err(Error::RaggedRow {
                    row: i + 1,
                    expected: d,
                    found: rec.len(),
                });
            }
            cells.push(
                rec.iter()
                    .map(|t| match t {
                        "0" => Ok(false),
                        "1" => Ok(true),
                        other => Err(Error::InvalidArgument(format!("mask cell `{other}` is not 0/1"))),
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(Mask { cells })
    }
}

/// Hide each observed cell independently with probability `rate`.
/// Deterministic given `seed`; row `i` draws from its own stream.
pub fn apply_mcar(ds: &Dataset, rate: f64, seed: u64) -> Result<(Dataset, Mask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("MCAR rate {rate} outside [0, 1)")));
    }
    let mut rows = ds.rows().to_vec();
    let mut mask = Mask::none(ds.m(), ds.d());
    for (i, row) in rows.iter_mut().enumerate() {
        let mut rng = rng::substream(seed, 0x4d43_4152, i as u64);
        for (f, cell) in row.iter_mut().enumerate() {
            let hide = rng.random::<f64>() < rate;
            if hide && cell.is_some() {
                *cell = None;
                mask.cells[i][f] = true;
            }
        }
    }
    Ok((Dataset::new_unchecked(ds.schema().clone(), rows)?, mask))
}

/// Names accepted by [`synth_domain`].
pub const SYNTHETIC_DOMAINS: [&str; 4] = ["ringGauss", "gridGauss", "circGauss", "randGauss"];

/// Generate one of the simulated 2D Gaussian-mixture domains.
///
/// * `ringGauss`: 8 modes of 200 points, centres on the unit circle, σ = 0.1.
/// * `gridGauss`: 25 modes of 100 points on a 5×5 grid of spacing 1, σ = 0.1.
/// * `circGauss`: a central mode (1000 points, σ = 0.2) inside a noisy unit
///   circle (1200 points, radial σ = 0.05).
/// * `randGauss`: 16 modes on regularly spaced sightlines, radii in
///   [0.5, 1.5], σ in [0.05, 0.2], random sizes summing to 3800.
pub fn synth_domain(name: &str, seed: u64) -> Result<Dataset> {
    let mut rng = rng::substream(seed, 0x5359_4e54, 0);
    let mut points: Vec<(f64, f64)> = Vec::new();
    let blob = |rng: &mut rng::StreamRng, cx: f64, cy: f64, sigma: f64, n: usize, pts: &mut Vec<(f64, f64)>| {
        let normal = Normal::new(0.0, sigma).expect("positive sigma");
        for _ in 0..n {
            pts.push((cx + normal.sample(rng), cy + normal.sample(rng)));
        }
    };
    match name {
        "ringGauss" => {
            for k in 0..8 {
                let a = std::f64::consts::TAU * k as f64 / 8.0;
                blob(&mut rng, a.cos(), a.sin(), 0.1, 200, &mut points);
            }
        }
        "gridGauss" => {
            for i in 0..5 {
                for j in 0..5 {
                    blob(&mut rng, i as f64 - 2.0, j as f64 - 2.0, 0.1, 100, &mut points);
                }
            }
        }
        "circGauss" => {
            blob(&mut rng, 0.0, 0.0, 0.2, 1000, &mut points);
            let radial = Normal::new(1.0, 0.05).expect("positive sigma");
            for _ in 0..1200 {
                let a = rng.random::<f64>() * std::f64::consts::TAU;
                let r = radial.sample(&mut rng);
                points.push((r * a.cos(), r * a.sin()));
            }
        }
        "randGauss" => {
            let weights: Vec<f64> = (0..16).map(|_| Exp1.sample(&mut rng)).collect();
            let sizes = apportion(3800, &weights);
            for (k, &n) in sizes.iter().enumerate() {
                let a = std::f64::consts::TAU * k as f64 / 16.0;
                let r = rng.random_range(0.5..=1.5);
                let sigma = rng.random_range(0.05..=0.2);
                blob(&mut rng, r * a.cos(), r * a.sin(), sigma, n, &mut points);
            }
        }
        other => return Err(Error::UnknownDomain(other.to_string())),
    }
    points.shuffle(&mut rng);
    let rows: Vec<Vec<Option<f64>>> = points.iter().map(|&(x, y)| vec![Some(x), Some(y)]).collect();
    let lo_hi = |sel: fn(&(f64, f64)) -> f64| {
        points
            .iter()
            .map(sel)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (xl, xh) = lo_hi(|p| p.0);
    let (yl, yh) = lo_hi(|p| p.1);
    let schema = Schema::new(vec![
        Feature {
            name: "x".into(),
            domain: FeatureDomain::Real { lo: xl, hi: xh },
        },
        Feature {
            name: "y".into(),
            domain: FeatureDomain::Real { lo: yl, hi: yh },
        },
    ])?;
    Dataset::new(schema, rows)
}

/// Largest-remainder split of `total` proportionally to `weights`.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = total - sizes.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        sizes[i] += 1;
    }
    sizes
}

/// Short human summary of a schema, one feature per line.
pub fn describe_schema(schema: &Schema) -> String {
    let mut out = String::new();
    for f in schema.features() {
        let _ = match &f.domain {
            FeatureDomain::Categorical { modalities } => {
                writeln!(out, "{}: categorical ({} modalities)", f.name, modalities.len())
            }
            FeatureDomain::Integer { lo, hi } => writeln!(out, "{}: integer [{lo}, {hi}]", f.name),
            FeatureDomain::Real { lo, hi } => writeln!(out, "{}: real [{lo}, {hi}]", f.name),
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Dataset> {
        read_csv(text.as_bytes(), "?")
    }

    #[test]
    fn two_column_typing() {
        let ds = parse("a,b\n1.5,a\n2.5,b\n").unwrap();
        assert_eq!(ds.m(), 2);
        assert_eq!(ds.schema().domain(0), &FeatureDomain::Real { lo: 1.5, hi: 2.5 });
        assert_eq!(
            ds.schema().domain(1),
            &FeatureDomain::Categorical {
                modalities: vec!["a".into(), "b".into()]
            }
        );
    }

    #[test]
    fn integer_column() {
        let ds = parse("n\n1\n2\n3\n").unwrap();
        assert_eq!(ds.schema().domain(0), &FeatureDomain::Integer { lo: 1, hi: 3 });
    }

    #[test]
    fn mixed_numbers_and_words_are_categorical() {
        let ds = parse("c\n1\nfoo\n2.5\n").unwrap();
        assert_eq!(ds.schema().domain(0).kind(), FeatureKind::Categorical);
    }

    #[test]
    fn missing_tokens() {
        let ds = parse("x,y\n1,?\n,2\n3,4\n").unwrap();
        assert_eq!(ds.missing_count(), 2);
        assert_eq!(ds.schema().domain(0), &FeatureDomain::Integer { lo: 1, hi: 3 });
        assert_eq!(ds.schema().domain(1), &FeatureDomain::Integer { lo: 2, hi: 4 });
    }

    #[test]
    fn errors() {
        assert!(matches!(parse("x,y\n1,2\n3\n"), Err(Error::RaggedRow { .. })));
        assert!(matches!(parse("x,y\n1,?\n2,\n"), Err(Error::EmptyColumn(c)) if c == "y"));
        assert!(matches!(load_csv("/nonexistent/file.csv", ""), Err(Error::Io(_))));
    }

    #[test]
    fn real_values_round_trip_as_real() {
        let ds = parse("x\n2.0\n3.0\n").unwrap();
        assert_eq!(ds.schema().domain(0).kind(), FeatureKind::Real);
        let again = read_csv(ds.canonical_csv().as_slice(), "").unwrap();
        assert_eq!(again, ds);
    }

    #[test]
    fn mcar_zero_rate_and_determinism() {
        let ds = synth_domain("ringGauss", 1).unwrap();
        let (same, mask) = apply_mcar(&ds, 0.0, 3).unwrap();
        assert_eq!(same, ds);
        assert!(mask.is_empty());
        let (a, ma) = apply_mcar(&ds, 0.05, 9).unwrap();
        let (b, mb) = apply_mcar(&ds, 0.05, 9).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(a, b);
        assert!(apply_mcar(&ds, 1.0, 0).is_err());
    }

    #[test]
    fn mcar_count_is_binomial() {
        // 5000 rows x 2 features = 10^4 cells; 3 sigma of Bin(10^4, 0.05).
        let rows = (0..5000).map(|i| vec![Some(i as f64), Some(0.5)]).collect();
        let schema = Schema::new(vec![
            Feature {
                name: "a".into(),
                domain: FeatureDomain::Real { lo: 0.0, hi: 4999.0 },
            },
            Feature {
                name: "b".into(),
                domain: FeatureDomain::Real { lo: 0.5, hi: 0.5 },
            },
        ])
        .unwrap();
        let ds = Dataset::new(schema, rows).unwrap();
        let sigma = (10_000.0f64 * 0.05 * 0.95).sqrt();
        for seed in 0..3 {
            let (_, mask) = apply_mcar(&ds, 0.05, seed).unwrap();
            let c = mask.count() as f64;
            assert!((c - 500.0).abs() <= 3.0 * sigma, "seed {seed}: {c}");
        }
    }

    #[test]
    fn synthetic_sizes() {
        for (name, m) in [("ringGauss", 1600), ("gridGauss", 2500), ("circGauss", 2200), ("randGauss", 3800)] {
            let ds = synth_domain(name, 5).unwrap();
            assert_eq!(ds.m(), m, "{name}");
            assert_eq!(ds.d(), 2);
            assert!(ds.schema().features().iter().all(|f| f.domain.kind() == FeatureKind::Real));
        }
        assert!(matches!(synth_domain("moons", 0), Err(Error::UnknownDomain(_))));
    }

    #[test]
    fn apportion_sums() {
        let s = apportion(3800, &[0.3, 1.2, 0.01, 2.0]);
        assert_eq!(s.iter().sum::<usize>(), 3800);
    }

    #[test]
    fn reencode_maps_modalities_by_name() {
        let ds = parse("c,v\nb,1\na,2\nc,3\n").unwrap();
        let sub = ds.subset(&[0, 2]).relearn_domains().unwrap();
        assert_eq!(
            sub.schema().domain(0),
            &FeatureDomain::Categorical {
                modalities: vec!["b".into(), "c".into()]
            }
        );
        let back = sub.reencode(ds.schema()).unwrap();
        assert_eq!(back.rows(), ds.subset(&[0, 2]).rows());
        assert!(ds.reencode(sub.schema()).is_err());
    }

    #[test]
    fn mask_csv_round_trip() {
        let ds = parse("x,y\n1,2\n3,4\n").unwrap();
        let mask = Mask::new(vec![vec![true, false], vec![false, true]]);
        let mut buf = Vec::new();
        mask.write_csv(&mut buf, ds.schema()).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "x,y\n1,0\n0,1\n");
        assert_eq!(Mask::read_csv(buf.as_slice()).unwrap(), mask);
    }
}
