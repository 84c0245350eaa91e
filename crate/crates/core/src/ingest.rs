//! Reading and writing grouped panels and grouping configurations.
//!
//! Panel CSV layout: `year,age,<bottom attributes...>,deaths,exposure`, one row per
//! (series, year, age) cell. Columns are located by header name.
//!
//! Grouping configuration is line-oriented:
//!
//! ```text
//! attributes = sex,region,prefecture
//! bottom = prefecture,sex
//! level =
//! level = sex
//! level = prefecture,sex
//! refine prefecture -> region
//! refine P1 -> R1
//! ```
//!
//! A `refine` line naming two declared attributes opens a refinement; the
//! following value-level `refine` lines fill in its mapping.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::domain::{AgeGrid, CountPanel, DomainError, GroupedDataset, GroupingScheme, Refinement, SeriesKey};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("incomplete rectangle: series `{key}` has no row for year {year}, age {age}")]
    IncompleteRectangle { key: String, year: i32, age: u32 },
    #[error("duplicate cell at line {line}: series `{key}`, year {year}, age {age}")]
    DuplicateCell { line: u64, key: String, year: i32, age: u32 },
    #[error("non-positive exposure at line {line}")]
    NonPositiveExposure { line: u64 },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

fn config_err(line: usize, message: impl Into<String>) -> IngestError {
    IngestError::Config {
        line,
        message: message.into(),
    }
}

fn split_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

pub fn parse_grouping_config(text: &str) -> Result<GroupingScheme, IngestError> {
    let mut attributes: Option<Vec<String>> = None;
    let mut bottom: Option<Vec<String>> = None;
    let mut levels: Vec<(usize, Vec<String>)> = Vec::new();
    let mut refinements: Vec<Refinement> = Vec::new();
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        last_line = line_no;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("refine ") {
            let (lhs, rhs) = rest
                .split_once("->")
                .ok_or_else(|| config_err(line_no, "expected `refine <child> -> <parent>`"))?;
            let (lhs, rhs) = (lhs.trim(), rhs.trim());
            if lhs.is_empty() || rhs.is_empty() {
                return Err(config_err(line_no, "empty refinement side"));
            }
            let attrs = attributes
                .as_ref()
                .ok_or_else(|| config_err(line_no, "`attributes` must precede `refine`"))?;
            let is_attr = |s: &str| attrs.iter().any(|a| a == s);
            if is_attr(lhs) && is_attr(rhs) {
                refinements.push(Refinement {
                    child: lhs.to_string(),
                    parent: rhs.to_string(),
                    map: BTreeMap::new(),
                });
            } else {
                let current = refinements
                    .last_mut()
                    .ok_or_else(|| config_err(line_no, "value refinement before any attribute refinement"))?;
                if let Some(prev) = current.map.insert(lhs.to_string(), rhs.to_string()) {
                    if prev != rhs {
                        return Err(config_err(line_no, format!("`{lhs}` refined to two different values")));
                    }
                }
            }
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| config_err(line_no, "expected `key = value`"))?;
        let value = value.trim();
        match key.trim() {
            "attributes" => {
                if attributes.is_some() {
                    return Err(config_err(line_no, "`attributes` declared twice"));
                }
                let list = split_list(value);
                if list.is_empty() {
                    return Err(config_err(line_no, "no attributes declared"));
                }
                attributes = Some(list);
            }
            "bottom" => {
                if bottom.is_some() {
                    return Err(config_err(line_no, "`bottom` declared twice"));
                }
                bottom = Some(split_list(value));
            }
            "level" => levels.push((line_no, split_list(value))),
            other => return Err(config_err(line_no, format!("unknown key `{other}`"))),
        }
    }

    let attributes = attributes.ok_or_else(|| config_err(last_line, "missing `attributes`"))?;
    let bottom = bottom.ok_or_else(|| config_err(last_line, "missing `bottom`"))?;
    if levels.is_empty() {
        return Err(config_err(last_line, "no `level` lines"));
    }
    for (line_no, level) in &levels {
        if let Some(a) = level.iter().find(|a| !attributes.contains(a)) {
            return Err(config_err(*line_no, format!("level references undeclared attribute `{a}`")));
        }
    }
    let last_level_line = levels[levels.len() - 1].0;
    GroupingScheme::new(
        attributes,
        bottom,
        levels.into_iter().map(|(_, l)| l).collect(),
        refinements,
    )
    .map_err(|e| config_err(last_level_line, e.to_string()))
}

pub fn load_grouping_config(path: impl AsRef<Path>) -> Result<GroupingScheme, IngestError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_grouping_config(&text)
}

pub fn format_grouping_config(scheme: &GroupingScheme) -> String {
    let mut out = String::new();
    out.push_str(&format!("attributes = {}\n", scheme.attribute_names().join(",")));
    out.push_str(&format!("bottom = {}\n", scheme.bottom_combo().join(",")));
    for level in scheme.levels() {
        if level.is_empty() {
            out.push_str("level =\n");
        } else {
            out.push_str(&format!("level = {}\n", level.join(",")));
        }
    }
    for r in scheme.refinements() {
        out.push_str(&format!("refine {} -> {}\n", r.child, r.parent));
        for (c, p) in &r.map {
            out.push_str(&format!("refine {c} -> {p}\n"));
        }
    }
    out
}

struct Cell {
    deaths: f64,
    exposure: f64,
}

/// Parses a panel CSV against an already-loaded scheme.
pub fn read_panel<R: Read>(reader: R, scheme: &GroupingScheme) -> Result<GroupedDataset, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| IngestError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let find = |name: &str| -> Result<usize, IngestError> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| IngestError::Parse {
                line: 1,
                message: format!("missing column `{name}`"),
            })
    };
    let year_col = find("year")?;
    let age_col = find("age")?;
    let deaths_col = find("deaths")?;
    let exposure_col = find("exposure")?;
    let attr_cols: Vec<(String, usize)> = scheme
        .bottom_combo()
        .iter()
        .map(|a| find(a).map(|c| (a.clone(), c)))
        .collect::<Result<_, _>>()?;
    if headers.len() != 4 + attr_cols.len() {
        return Err(IngestError::Parse {
            line: 1,
            message: format!("expected {} columns, found {}", 4 + attr_cols.len(), headers.len()),
        });
    }

    let mut cells: BTreeMap<SeriesKey, BTreeMap<(i32, u32), Cell>> = BTreeMap::new();
    let mut years = BTreeSet::new();
    let mut ages = BTreeSet::new();
    let mut attr_values: Vec<BTreeSet<String>> = vec![BTreeSet::new(); attr_cols.len()];

    for record in rdr.records() {
        let record = record.map_err(|e| IngestError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |c: usize| record.get(c).unwrap_or("").trim();
        let parse_err = |what: &str, v: &str| IngestError::Parse {
            line,
            message: format!("invalid {what} `{v}`"),
        };
        let year: i32 = field(year_col).parse().map_err(|_| parse_err("year", field(year_col)))?;
        let age: u32 = field(age_col).parse().map_err(|_| parse_err("age", field(age_col)))?;
        let deaths: f64 = field(deaths_col)
            .parse()
            .map_err(|_| parse_err("deaths", field(deaths_col)))?;
        let exposure: f64 = field(exposure_col)
            .parse()
            .map_err(|_| parse_err("exposure", field(exposure_col)))?;
        if !deaths.is_finite() || deaths < 0.0 {
            return Err(parse_err("deaths", field(deaths_col)));
        }
        if !exposure.is_finite() {
            return Err(parse_err("exposure", field(exposure_col)));
        }
        if exposure <= 0.0 {
            return Err(IngestError::NonPositiveExposure { line });
        }
        let mut pairs = Vec::with_capacity(attr_cols.len());
        for (i, (name, col)) in attr_cols.iter().enumerate() {
            let v = field(*col);
            if v.is_empty() {
                return Err(parse_err(name, v));
            }
            attr_values[i].insert(v.to_string());
            pairs.push((name.clone(), v.to_string()));
        }
        let key = SeriesKey::from_pairs(pairs);
        years.insert(year);
        ages.insert(age);
        let series = cells.entry(key.clone()).or_default();
        if series.insert((year, age), Cell { deaths, exposure }).is_some() {
            return Err(IngestError::DuplicateCell {
                line,
                key: key.to_string(),
                year,
                age,
            });
        }
    }
    if cells.is_empty() {
        return Err(IngestError::Parse {
            line: 1,
            message: "panel has no data rows".into(),
        });
    }

    let first_year = *years.iter().next().unwrap();
    let last_year = *years.iter().next_back().unwrap();
    let all_years: Vec<i32> = (first_year..=last_year).collect();
    let ages: Vec<u32> = ages.into_iter().collect();

    // Full cross product of observed attribute values.
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (i, (name, _)) in attr_cols.iter().enumerate() {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                attr_values[i].iter().map(move |v| {
                    let mut next = prefix.clone();
                    next.push((name.clone(), v.clone()));
                    next
                })
            })
            .collect();
    }
    let mut expected: Vec<SeriesKey> = combos.into_iter().map(SeriesKey::from_pairs).collect();
    expected.sort();

    let (n, p) = (all_years.len(), ages.len());
    let mut bottom = BTreeMap::new();
    for key in expected {
        let series = cells.get(&key);
        let mut deaths = DMatrix::zeros(n, p);
        let mut exposure = DMatrix::zeros(n, p);
        for (r, &year) in all_years.iter().enumerate() {
            for (c, &age) in ages.iter().enumerate() {
                let cell = series
                    .and_then(|s| s.get(&(year, age)))
                    .ok_or_else(|| IngestError::IncompleteRectangle {
                        key: key.to_string(),
                        year,
                        age,
                    })?;
                deaths[(r, c)] = cell.deaths;
                exposure[(r, c)] = cell.exposure;
            }
        }
        bottom.insert(key, CountPanel { deaths, exposure });
    }
    let grid = AgeGrid::new(ages.iter().map(|&a| f64::from(a)).collect())?;
    Ok(GroupedDataset::new(grid, scheme.clone(), all_years, bottom)?)
}

/// Loads a grouping configuration and the panel it describes.
pub fn load_panel(path: impl AsRef<Path>, config: impl AsRef<Path>) -> Result<GroupedDataset, IngestError> {
    let scheme = load_grouping_config(config)?;
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_panel(std::io::BufReader::new(file), &scheme)
}

/// Writes bottom-level counts in the panel layout, rows ordered by series, year, age.
pub fn write_panel<W: Write>(dataset: &GroupedDataset, writer: W) -> Result<(), IngestError> {
    let io = |e: csv::Error| IngestError::Io {
        path: "<panel>".into(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut w = csv::Writer::from_writer(writer);
    let attrs = dataset.scheme().bottom_combo();
    let mut header = vec!["year".to_string(), "age".to_string()];
    header.extend(attrs.iter().cloned());
    header.push("deaths".into());
    header.push("exposure".into());
    w.write_record(&header).map_err(io)?;
    for (key, panel) in dataset.bottom() {
        for (r, year) in dataset.years().iter().enumerate() {
            for (c, age) in dataset.grid().ages().iter().enumerate() {
                let mut row = vec![year.to_string(), format!("{}", *age as u32)];
                row.extend(attrs.iter().map(|a| key.get(a).unwrap_or("").to_string()));
                row.push(format!("{}", panel.deaths[(r, c)]));
                row.push(format!("{}", panel.exposure[(r, c)]));
                w.write_record(&row).map_err(io)?;
            }
        }
    }
    w.flush().map_err(|source| IngestError::Io {
        path: "<panel>".into(),
        source,
    })?;
    Ok(())
}
