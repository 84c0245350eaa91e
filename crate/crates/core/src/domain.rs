//! Core value types: age grids, functional series, attribute keys, grouping
//! schemes and the exposure-weighted grouped dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("invalid age grid: {0}")]
    InvalidGrid(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("non-positive rate at row {row}, column {col}")]
    NonPositiveRate { row: usize, col: usize },
    #[error("years must be strictly increasing and consecutive")]
    InvalidYears,
    #[error("unknown series key `{0}`")]
    UnknownKey(String),
    #[error("zero exposure for `{key}` at row {row}, column {col}")]
    ZeroExposure { key: String, row: usize, col: usize },
    #[error("negative deaths for `{key}` at row {row}, column {col}")]
    NegativeDeaths { key: String, row: usize, col: usize },
    #[error("invalid grouping scheme: {0}")]
    InvalidScheme(String),
    #[error("attribute `{attribute}` value `{value}` has no declared refinement")]
    UnmappedValue { attribute: String, value: String },
}

/// Strictly increasing grid of ages shared by every series in a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeGrid {
    ages: Vec<f64>,
}

impl AgeGrid {
    pub fn new(ages: Vec<f64>) -> Result<Self, DomainError> {
        if ages.len() < 2 {
            return Err(DomainError::InvalidGrid("need at least two grid points".into()));
        }
        if ages.iter().any(|a| !a.is_finite()) {
            return Err(DomainError::InvalidGrid("grid points must be finite".into()));
        }
        if ages.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DomainError::InvalidGrid("grid must be strictly increasing".into()));
        }
        Ok(Self { ages })
    }

    /// Integer ages `start, start + step, ..., <= end`.
    pub fn regular(start: u32, end: u32, step: u32) -> Result<Self, DomainError> {
        if step == 0 {
            return Err(DomainError::InvalidGrid("step must be positive".into()));
        }
        Self::new((start..=end).step_by(step as usize).map(f64::from).collect())
    }

    pub fn ages(&self) -> &[f64] {
        &self.ages
    }

    pub fn len(&self) -> usize {
        self.ages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ages.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.ages[0]
    }

    pub fn last(&self) -> f64 {
        self.ages[self.ages.len() - 1]
    }

    /// Trapezoidal quadrature weights; they sum to `last - first`.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let p = self.ages.len();
        let mut w = vec![0.0; p];
        for j in 0..p - 1 {
            let half = 0.5 * (self.ages[j + 1] - self.ages[j]);
            w[j] += half;
            w[j + 1] += half;
        }
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scale {
    LogRate,
    Rate,
}

/// One series of curves: `values` has one row per year and one column per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalSeries {
    grid: AgeGrid,
    years: Vec<i32>,
    values: DMatrix<f64>,
    scale: Scale,
}

impl FunctionalSeries {
    pub fn new(
        grid: AgeGrid,
        years: Vec<i32>,
        values: DMatrix<f64>,
        scale: Scale,
    ) -> Result<Self, DomainError> {
        if values.nrows() != years.len() || values.ncols() != grid.len() {
            return Err(DomainError::ShapeMismatch(format!(
                "values are {}x{}, expected {}x{}",
                values.nrows(),
                values.ncols(),
                years.len(),
                grid.len()
            )));
        }
        if years.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(DomainError::InvalidYears);
        }
        for row in 0..values.nrows() {
            for col in 0..values.ncols() {
                let v = values[(row, col)];
                if !v.is_finite() {
                    return Err(DomainError::NonFinite { row, col });
                }
                if scale == Scale::Rate && v <= 0.0 {
                    return Err(DomainError::NonPositiveRate { row, col });
                }
            }
        }
        Ok(Self {
            grid,
            years,
            values,
            scale,
        })
    }

    /// Builds a series without validating rate positivity, for rate data that may
    /// legitimately contain zero-death cells.
    pub(crate) fn new_unchecked_rates(grid: AgeGrid, years: Vec<i32>, values: DMatrix<f64>) -> Self {
        Self {
            grid,
            years,
            values,
            scale: Scale::Rate,
        }
    }

    pub fn grid(&self) -> &AgeGrid {
        &self.grid
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn n_years(&self) -> usize {
        self.years.len()
    }

    pub fn curve(&self, row: usize) -> Vec<f64> {
        self.values.row(row).iter().copied().collect()
    }

    /// The first `n` years.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.years.len());
        Self {
            grid: self.grid.clone(),
            years: self.years[..n].to_vec(),
            values: self.values.rows(0, n).into_owned(),
            scale: self.scale,
        }
    }

    pub fn to_log(&self) -> Result<Self, DomainError> {
        match self.scale {
            Scale::LogRate => Ok(self.clone()),
            Scale::Rate => Self::new(
                self.grid.clone(),
                self.years.clone(),
                self.values.map(f64::ln),
                Scale::LogRate,
            ),
        }
    }

    pub fn to_rate(&self) -> Self {
        match self.scale {
            Scale::Rate => self.clone(),
            Scale::LogRate => Self {
                grid: self.grid.clone(),
                years: self.years.clone(),
                values: self.values.map(f64::exp),
                scale: Scale::Rate,
            },
        }
    }
}

/// Attribute assignment identifying one series; the empty map is the grand total.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SeriesKey(BTreeMap<String, String>);

impl SeriesKey {
    pub fn total() -> Self {
        Self::default()
    }

    pub fn from_pairs<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        Self(pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect())
    }

    pub fn attributes(&self) -> &BTreeMap<String, String> {
        &self.0
    }

    pub fn get(&self, attribute: &str) -> Option<&str> {
        self.0.get(attribute).map(String::as_str)
    }

    pub fn is_total(&self) -> bool {
        self.0.is_empty()
    }

    pub fn attribute_set(&self) -> BTreeSet<&str> {
        self.0.keys().map(String::as_str).collect()
    }

    /// Restriction of this key to `attributes`; missing attributes are skipped.
    pub fn project(&self, attributes: &[String]) -> Self {
        Self(
            attributes
                .iter()
                .filter_map(|a| self.0.get(a).map(|v| (a.clone(), v.clone())))
                .collect(),
        )
    }

    /// True if every attribute of `self` has the same value in `other`.
    pub fn is_consistent_with(&self, other: &BTreeMap<String, String>) -> bool {
        self.0.iter().all(|(k, v)| other.get(k) == Some(v))
    }
}

impl fmt::Display for SeriesKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("total");
        }
        let parts: Vec<String> = self.0.iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&parts.join(";"))
    }
}

impl FromStr for SeriesKey {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() || s == "total" {
            return Ok(Self::total());
        }
        let mut map = BTreeMap::new();
        for part in s.split(';') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| DomainError::UnknownKey(s.to_string()))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() || map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(DomainError::UnknownKey(s.to_string()));
            }
        }
        Ok(Self(map))
    }
}

/// Declares that values of `child` nest inside values of `parent`
/// (e.g. prefecture -> region).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Refinement {
    pub child: String,
    pub parent: String,
    pub map: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupingScheme {
    attribute_names: Vec<String>,
    bottom_combo: Vec<String>,
    levels: Vec<Vec<String>>,
    refinements: Vec<Refinement>,
}

impl GroupingScheme {
    pub fn new(
        attribute_names: Vec<String>,
        bottom_combo: Vec<String>,
        levels: Vec<Vec<String>>,
        refinements: Vec<Refinement>,
    ) -> Result<Self, DomainError> {
        let invalid = |msg: String| Err(DomainError::InvalidScheme(msg));
        let declared: BTreeSet<&str> = attribute_names.iter().map(String::as_str).collect();
        if declared.len() != attribute_names.len() {
            return invalid("duplicate attribute name".into());
        }
        if bottom_combo.is_empty() {
            return invalid("bottom combination is empty".into());
        }
        if levels.is_empty() {
            return invalid("no levels declared".into());
        }
        for a in &bottom_combo {
            if !declared.contains(a.as_str()) {
                return invalid(format!("bottom attribute `{a}` is not declared"));
            }
        }
        for r in &refinements {
            for a in [&r.child, &r.parent] {
                if !declared.contains(a.as_str()) {
                    return invalid(format!("refinement attribute `{a}` is not declared"));
                }
            }
            if r.child == r.parent {
                return invalid(format!("attribute `{}` refines itself", r.child));
            }
        }
        // Attributes reachable from the bottom combination through refinements.
        let mut reachable: BTreeSet<String> = bottom_combo.iter().cloned().collect();
        loop {
            let before = reachable.len();
            for r in &refinements {
                if reachable.contains(&r.child) {
                    reachable.insert(r.parent.clone());
                }
            }
            if reachable.len() == before {
                break;
            }
        }
        let mut seen = BTreeSet::new();
        for level in &levels {
            let set: BTreeSet<&String> = level.iter().collect();
            if set.len() != level.len() {
                return invalid(format!("level {level:?} repeats an attribute"));
            }
            for a in level {
                if !declared.contains(a.as_str()) {
                    return invalid(format!("level attribute `{a}` is not declared"));
                }
                if !reachable.contains(a) {
                    return invalid(format!(
                        "level attribute `{a}` is neither a bottom attribute nor derivable from one"
                    ));
                }
            }
            let mut sorted: Vec<String> = level.clone();
            sorted.sort();
            if !seen.insert(sorted) {
                return invalid(format!("level {level:?} declared twice"));
            }
        }
        let bottom_set: BTreeSet<&String> = bottom_combo.iter().collect();
        let last: BTreeSet<&String> = levels[levels.len() - 1].iter().collect();
        if last != bottom_set {
            return invalid("the bottom combination must be the last level".into());
        }
        Ok(Self {
            attribute_names,
            bottom_combo,
            levels,
            refinements,
        })
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn bottom_combo(&self) -> &[String] {
        &self.bottom_combo
    }

    pub fn levels(&self) -> &[Vec<String>] {
        &self.levels
    }

    pub fn refinements(&self) -> &[Refinement] {
        &self.refinements
    }

    /// Human-readable level label: `total` or attribute names joined by `*`.
    pub fn level_label(&self, level: usize) -> String {
        let attrs = &self.levels[level];
        if attrs.is_empty() {
            "total".to_string()
        } else {
            attrs.join("*")
        }
    }

    /// Expands a bottom key with every attribute derivable through refinements.
    pub fn resolve(&self, bottom: &SeriesKey) -> Result<BTreeMap<String, String>, DomainError> {
        let mut full = bottom.attributes().clone();
        loop {
            let mut changed = false;
            for r in &self.refinements {
                if full.contains_key(&r.parent) {
                    continue;
                }
                if let Some(child_value) = full.get(&r.child) {
                    let parent_value =
                        r.map
                            .get(child_value)
                            .ok_or_else(|| DomainError::UnmappedValue {
                                attribute: r.child.clone(),
                                value: child_value.clone(),
                            })?;
                    full.insert(r.parent.clone(), parent_value.clone());
                    changed = true;
                }
            }
            if !changed {
                return Ok(full);
            }
        }
    }

    /// Bottom keys consistent with `key`, in the order of `bottom_keys`.
    pub fn members(
        &self,
        key: &SeriesKey,
        bottom_keys: &[SeriesKey],
    ) -> Result<Vec<SeriesKey>, DomainError> {
        let attrs = key.attribute_set();
        let matches_level = self.levels.iter().any(|level| {
            level.len() == attrs.len() && level.iter().all(|a| attrs.contains(a.as_str()))
        });
        if !matches_level {
            return Err(DomainError::UnknownKey(key.to_string()));
        }
        let mut out = Vec::new();
        for b in bottom_keys {
            if key.is_consistent_with(&self.resolve(b)?) {
                out.push(b.clone());
            }
        }
        if out.is_empty() {
            return Err(DomainError::UnknownKey(key.to_string()));
        }
        Ok(out)
    }

    /// Distinct keys of every level, levels in scheme order and keys sorted within each.
    pub fn level_keys(&self, bottom_keys: &[SeriesKey]) -> Result<Vec<Vec<SeriesKey>>, DomainError> {
        let resolved: Vec<SeriesKey> = bottom_keys
            .iter()
            .map(|b| self.resolve(b).map(SeriesKey))
            .collect::<Result<_, _>>()?;
        Ok(self
            .levels
            .iter()
            .map(|level| {
                resolved
                    .iter()
                    .map(|full| full.project(level))
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect()
            })
            .collect())
    }
}

/// Death counts and exposures for one series, `years x ages`.
#[derive(Debug, Clone, PartialEq)]
pub struct CountPanel {
    pub deaths: DMatrix<f64>,
    pub exposure: DMatrix<f64>,
}

impl CountPanel {
    pub fn rates(&self) -> DMatrix<f64> {
        self.deaths.component_div(&self.exposure)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivedSeries {
    pub counts: CountPanel,
    pub rates: FunctionalSeries,
    pub level: usize,
}

/// Bottom-level counts plus derived aggregates for every level of a grouping scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    grid: AgeGrid,
    scheme: GroupingScheme,
    years: Vec<i32>,
    bottom: BTreeMap<SeriesKey, CountPanel>,
    level_keys: Vec<Vec<SeriesKey>>,
    members: BTreeMap<SeriesKey, Vec<SeriesKey>>,
    derived: BTreeMap<SeriesKey, DerivedSeries>,
}

impl GroupedDataset {
    pub fn new(
        grid: AgeGrid,
        scheme: GroupingScheme,
        years: Vec<i32>,
        bottom: BTreeMap<SeriesKey, CountPanel>,
    ) -> Result<Self, DomainError> {
        if years.is_empty() || years.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(DomainError::InvalidYears);
        }
        if bottom.is_empty() {
            return Err(DomainError::InvalidScheme("dataset has no bottom series".into()));
        }
        let bottom_attrs: BTreeSet<&str> = scheme.bottom_combo().iter().map(String::as_str).collect();
        let (n, p) = (years.len(), grid.len());
        for (key, panel) in &bottom {
            if key.attribute_set() != bottom_attrs {
                return Err(DomainError::InvalidScheme(format!(
                    "bottom key `{key}` does not carry exactly the bottom attributes"
                )));
            }
            for m in [&panel.deaths, &panel.exposure] {
                if m.shape() != (n, p) {
                    return Err(DomainError::ShapeMismatch(format!(
                        "series `{key}` is {}x{}, expected {n}x{p}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
            }
            for row in 0..n {
                for col in 0..p {
                    let (d, e) = (panel.deaths[(row, col)], panel.exposure[(row, col)]);
                    if !d.is_finite() || !e.is_finite() {
                        return Err(DomainError::NonFinite { row, col });
                    }
                    if d < 0.0 {
                        return Err(DomainError::NegativeDeaths {
                            key: key.to_string(),
                            row,
                            col,
                        });
                    }
                    if e <= 0.0 {
                        return Err(DomainError::ZeroExposure {
                            key: key.to_string(),
                            row,
                            col,
                        });
                    }
                }
            }
        }
        let bottom_keys: Vec<SeriesKey> = bottom.keys().cloned().collect();
        let level_keys = scheme.level_keys(&bottom_keys)?;
        let mut members = BTreeMap::new();
        let mut derived = BTreeMap::new();
        for (level, keys) in level_keys.iter().enumerate() {
            for key in keys {
                let m = scheme.members(key, &bottom_keys)?;
                let mut deaths = DMatrix::zeros(n, p);
                let mut exposure = DMatrix::zeros(n, p);
                for b in &m {
                    deaths += &bottom[b].deaths;
                    exposure += &bottom[b].exposure;
                }
                let counts = CountPanel { deaths, exposure };
                let rates = FunctionalSeries::new_unchecked_rates(grid.clone(), years.clone(), counts.rates());
                members.insert(key.clone(), m);
                derived.insert(key.clone(), DerivedSeries { counts, rates, level });
            }
        }
        Ok(Self {
            grid,
            scheme,
            years,
            bottom,
            level_keys,
            members,
            derived,
        })
    }

    pub fn grid(&self) -> &AgeGrid {
        &self.grid
    }

    pub fn scheme(&self) -> &GroupingScheme {
        &self.scheme
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn n_years(&self) -> usize {
        self.years.len()
    }

    pub fn bottom(&self) -> &BTreeMap<SeriesKey, CountPanel> {
        &self.bottom
    }

    pub fn bottom_keys(&self) -> &[SeriesKey] {
        &self.level_keys[self.level_keys.len() - 1]
    }

    pub fn level_keys(&self) -> &[Vec<SeriesKey>] {
        &self.level_keys
    }

    /// All keys in canonical order: levels in scheme order, keys sorted within a level.
    pub fn all_keys(&self) -> Vec<SeriesKey> {
        self.level_keys.iter().flatten().cloned().collect()
    }

    pub fn n_series(&self) -> usize {
        self.level_keys.iter().map(Vec::len).sum()
    }

    pub fn series(&self, key: &SeriesKey) -> Result<&DerivedSeries, DomainError> {
        self.derived
            .get(key)
            .ok_or_else(|| DomainError::UnknownKey(key.to_string()))
    }

    pub fn members(&self, key: &SeriesKey) -> Result<&[SeriesKey], DomainError> {
        self.members
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| DomainError::UnknownKey(key.to_string()))
    }

    /// Exposure-weighted aggregate rate `sum_b (E_b / E_g) * rate_b`, evaluated as
    /// `deaths_g / exposure_g`.
    pub fn aggregate(&self, key: &SeriesKey) -> Result<FunctionalSeries, DomainError> {
        let d = self.series(key)?;
        let e = &d.counts.exposure;
        for row in 0..e.nrows() {
            for col in 0..e.ncols() {
                if e[(row, col)] <= 0.0 {
                    return Err(DomainError::ZeroExposure {
                        key: key.to_string(),
                        row,
                        col,
                    });
                }
            }
        }
        Ok(d.rates.clone())
    }

    /// The dataset restricted to its first `n` years.
    pub fn head(&self, n: usize) -> Result<Self, DomainError> {
        self.slice(0, n.min(self.years.len()))
    }

    /// The `len` years starting at row `start`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self, DomainError> {
        if start + len > self.years.len() {
            return Err(DomainError::InvalidYears);
        }
        let bottom = self
            .bottom
            .iter()
            .map(|(k, c)| {
                (
                    k.clone(),
                    CountPanel {
                        deaths: c.deaths.rows(start, len).into_owned(),
                        exposure: c.exposure.rows(start, len).into_owned(),
                    },
                )
            })
            .collect();
        Self::new(self.grid.clone(), self.scheme.clone(), self.years[start..start + len].to_vec(), bottom)
    }
}
