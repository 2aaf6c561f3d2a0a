//! Panel data ingestion, covariate roles, standardization and design matrices.
//!
//! A [`Schema`] is read from a small TOML sidecar next to the CSV. It names the
//! outcome and exposure columns, the optional unit and time columns, and lists
//! every covariate with its kind and roles:
//!
//! ```toml
//! outcome = "y"
//! exposure = "z"
//! unit = "state"
//! time = "year"
//!
//! [[covariate]]
//! name = "income"
//! kind = "numeric"
//! roles = ["control", "moderator"]
//! ```

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Control,
    Moderator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum CovariateKind {
    Numeric,
    Categorical { levels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
    pub roles: Vec<Role>,
}

impl CovariateSpec {
    pub fn numeric(name: impl Into<String>, roles: &[Role]) -> Self {
        CovariateSpec {
            name: name.into(),
            kind: CovariateKind::Numeric,
            roles: roles.to_vec(),
        }
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.roles.contains(&role)
    }
}

/// Column → role declarations, as read from the sidecar file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub outcome: String,
    pub exposure: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<String>,
    #[serde(default, rename = "covariate")]
    pub covariates: Vec<SchemaEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaEntry {
    pub name: String,
    pub kind: String,
    pub roles: Vec<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
}

impl Schema {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let schema: Schema = toml::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut names: Vec<&str> = vec![&self.outcome, &self.exposure];
        names.extend(self.unit.as_deref());
        names.extend(self.time.as_deref());
        names.extend(self.covariates.iter().map(|c| c.name.as_str()));
        for name in names {
            if !seen.insert(name) {
                return Err(Error::Schema {
                    column: name.to_string(),
                    reason: "is declared more than once".into(),
                });
            }
        }
        for entry in &self.covariates {
            if entry.roles.is_empty() {
                return Err(Error::Schema {
                    column: entry.name.clone(),
                    reason: "has no roles".into(),
                });
            }
            if entry.kind != "numeric" && entry.kind != "categorical" {
                return Err(Error::Schema {
                    column: entry.name.clone(),
                    reason: format!("has unknown kind `{}`", entry.kind),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<f64>),
    /// Level codes into the owning spec's level list.
    Categorical(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Covariate {
    pub spec: CovariateSpec,
    pub data: ColumnData,
}

/// A categorical identifier column with sorted level names.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub name: String,
    pub levels: Vec<String>,
    pub codes: Vec<u32>,
}

impl Factor {
    pub fn from_labels(name: impl Into<String>, labels: &[String]) -> Self {
        let levels: Vec<String> = labels
            .iter()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let codes = labels
            .iter()
            .map(|l| levels.binary_search(l).expect("level present") as u32)
            .collect();
        Factor {
            name: name.into(),
            levels,
            codes,
        }
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> + '_ {
        self.codes.iter().map(|&c| self.levels[c as usize].as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub outcome_name: String,
    pub exposure_name: String,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub covariates: Vec<Covariate>,
    pub unit: Option<Factor>,
    pub time: Option<(String, Vec<f64>)>,
}

impl PanelDataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Checks lengths, finiteness and level codes.
    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if n < 2 {
            return Err(Error::Degenerate(format!("need at least 2 observations, got {n}")));
        }
        let check_len = |name: &str, len: usize| -> Result<()> {
            if len != n {
                return Err(Error::Shape(format!("column `{name}` has {len} rows, expected {n}")));
            }
            Ok(())
        };
        check_len(&self.exposure_name, self.z.len())?;
        for (name, col) in [(&self.outcome_name, &self.y), (&self.exposure_name, &self.z)] {
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    row: row + 1,
                    column: name.clone(),
                    reason: "non-finite value".into(),
                });
            }
        }
        for cov in &self.covariates {
            if cov.spec.roles.is_empty() {
                return Err(Error::Schema {
                    column: cov.spec.name.clone(),
                    reason: "has no roles".into(),
                });
            }
            match (&cov.data, &cov.spec.kind) {
                (ColumnData::Numeric(v), CovariateKind::Numeric) => {
                    check_len(&cov.spec.name, v.len())?;
                    if let Some(row) = v.iter().position(|x| !x.is_finite()) {
                        return Err(Error::Parse {
                            row: row + 1,
                            column: cov.spec.name.clone(),
                            reason: "non-finite value".into(),
                        });
                    }
                }
                (ColumnData::Categorical(codes), CovariateKind::Categorical { levels }) => {
                    check_len(&cov.spec.name, codes.len())?;
                    if levels.is_empty() || codes.iter().any(|&c| c as usize >= levels.len()) {
                        return Err(Error::Schema {
                            column: cov.spec.name.clone(),
                            reason: "has codes outside its level list".into(),
                        });
                    }
                }
                _ => {
                    return Err(Error::Schema {
                        column: cov.spec.name.clone(),
                        reason: "data does not match declared kind".into(),
                    })
                }
            }
        }
        if let Some(unit) = &self.unit {
            check_len(&unit.name, unit.codes.len())?;
            if unit.levels.is_empty() {
                return Err(Error::Schema {
                    column: unit.name.clone(),
                    reason: "has no levels".into(),
                });
            }
        }
        if let Some((name, t)) = &self.time {
            check_len(name, t.len())?;
        }
        Ok(())
    }

    /// Content hash over every value and name, stable across platforms.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let put_f64s = |h: &mut Sha256, v: &[f64]| {
            for x in v {
                h.update(x.to_bits().to_le_bytes());
            }
        };
        h.update(self.outcome_name.as_bytes());
        put_f64s(&mut h, &self.y);
        h.update(self.exposure_name.as_bytes());
        put_f64s(&mut h, &self.z);
        for cov in &self.covariates {
            h.update(cov.spec.name.as_bytes());
            match &cov.data {
                ColumnData::Numeric(v) => put_f64s(&mut h, v),
                ColumnData::Categorical(codes) => {
                    for c in cov.level_labels() {
                        h.update(c.as_bytes());
                        h.update([0u8]);
                    }
                    h.update((codes.len() as u64).to_le_bytes());
                }
            }
            for r in &cov.spec.roles {
                h.update([*r as u8]);
            }
        }
        if let Some(unit) = &self.unit {
            h.update(unit.name.as_bytes());
            for l in unit.labels() {
                h.update(l.as_bytes());
                h.update([0u8]);
            }
        }
        if let Some((name, t)) = &self.time {
            h.update(name.as_bytes());
            put_f64s(&mut h, t);
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn covariate(&self, name: &str) -> Option<&Covariate> {
        self.covariates.iter().find(|c| c.spec.name == name)
    }

    /// Row partition by the unit column, or by any categorical covariate.
    pub fn groups_by(&self, column: &str) -> Result<(Vec<String>, Vec<u32>)> {
        if let Some(unit) = self.unit.as_ref().filter(|u| u.name == column || column == "unit") {
            return Ok((unit.levels.clone(), unit.codes.clone()));
        }
        match self.covariate(column) {
            Some(Covariate {
                spec:
                    CovariateSpec {
                        kind: CovariateKind::Categorical { levels },
                        ..
                    },
                data: ColumnData::Categorical(codes),
            }) => Ok((levels.clone(), codes.clone())),
            Some(_) => Err(Error::Config(format!("grouping column `{column}` is not categorical"))),
            None => Err(Error::Schema {
                column: column.to_string(),
                reason: "is not a categorical column of the dataset".into(),
            }),
        }
    }

    pub fn schema(&self) -> Schema {
        Schema {
            outcome: self.outcome_name.clone(),
            exposure: self.exposure_name.clone(),
            unit: self.unit.as_ref().map(|u| u.name.clone()),
            time: self.time.as_ref().map(|(n, _)| n.clone()),
            covariates: self
                .covariates
                .iter()
                .map(|c| SchemaEntry {
                    name: c.spec.name.clone(),
                    kind: match c.spec.kind {
                        CovariateKind::Numeric => "numeric".into(),
                        CovariateKind::Categorical { .. } => "categorical".into(),
                    },
                    roles: c.spec.roles.clone(),
                    levels: match &c.spec.kind {
                        CovariateKind::Categorical { levels } => Some(levels.clone()),
                        CovariateKind::Numeric => None,
                    },
                })
                .collect(),
        }
    }
}

impl Covariate {
    fn level_labels(&self) -> Vec<&str> {
        match (&self.spec.kind, &self.data) {
            (CovariateKind::Categorical { levels }, ColumnData::Categorical(codes)) => {
                codes.iter().map(|&c| levels[c as usize].as_str()).collect()
            }
            _ => Vec::new(),
        }
    }
}

fn parse_f64(cell: &str, row: usize, column: &str) -> Result<f64> {
    let cell = cell.trim();
    if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan") {
        return Err(Error::MissingValue {
            row,
            column: column.to_string(),
        });
    }
    let v: f64 = cell.parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        reason: format!("`{cell}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            reason: format!("`{cell}` is not finite"),
        });
    }
    Ok(v)
}

fn parse_label(cell: &str, row: usize, column: &str) -> Result<String> {
    let cell = cell.trim();
    if cell.is_empty() || cell.eq_ignore_ascii_case("na") {
        return Err(Error::MissingValue {
            row,
            column: column.to_string(),
        });
    }
    Ok(cell.to_string())
}

/// Reads a CSV panel. Rows are numbered from 1 (first data row) in errors.
pub fn read_panel<R: Read>(reader: R, schema: &Schema) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let index_of = |name: &str| -> Result<usize> {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Schema {
            column: name.to_string(),
            reason: "is missing from the CSV header".into(),
        })
    };
    let y_idx = index_of(&schema.outcome)?;
    let z_idx = index_of(&schema.exposure)?;
    let unit_idx = schema.unit.as_deref().map(index_of).transpose()?;
    let time_idx = schema.time.as_deref().map(index_of).transpose()?;
    let cov_idx = schema
        .covariates
        .iter()
        .map(|c| index_of(&c.name))
        .collect::<Result<Vec<_>>>()?;

    let mut y = Vec::new();
    let mut z = Vec::new();
    let mut unit_labels = Vec::new();
    let mut time = Vec::new();
    let mut numeric: Vec<Vec<f64>> = vec![Vec::new(); schema.covariates.len()];
    let mut labels: Vec<Vec<String>> = vec![Vec::new(); schema.covariates.len()];

    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let cell = |i: usize| record.get(i).unwrap_or("");
        y.push(parse_f64(cell(y_idx), row, &schema.outcome)?);
        z.push(parse_f64(cell(z_idx), row, &schema.exposure)?);
        if let (Some(i), Some(name)) = (unit_idx, &schema.unit) {
            unit_labels.push(parse_label(cell(i), row, name)?);
        }
        if let (Some(i), Some(name)) = (time_idx, &schema.time) {
            time.push(parse_f64(cell(i), row, name)?);
        }
        for (k, entry) in schema.covariates.iter().enumerate() {
            let c = cell(cov_idx[k]);
            if entry.kind == "numeric" {
                numeric[k].push(parse_f64(c, row, &entry.name)?);
            } else {
                labels[k].push(parse_label(c, row, &entry.name)?);
            }
        }
    }

    let mut covariates = Vec::with_capacity(schema.covariates.len());
    for (k, entry) in schema.covariates.iter().enumerate() {
        let (kind, data) = if entry.kind == "numeric" {
            (CovariateKind::Numeric, ColumnData::Numeric(std::mem::take(&mut numeric[k])))
        } else {
            let levels = match &entry.levels {
                Some(levels) => levels.clone(),
                None => labels[k]
                    .iter()
                    .cloned()
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect(),
            };
            let mut codes = Vec::with_capacity(labels[k].len());
            for (r, l) in labels[k].iter().enumerate() {
                let code = levels.iter().position(|x| x == l).ok_or_else(|| Error::Parse {
                    row: r + 1,
                    column: entry.name.clone(),
                    reason: format!("`{l}` is not a declared level"),
                })?;
                codes.push(code as u32);
            }
            (CovariateKind::Categorical { levels }, ColumnData::Categorical(codes))
        };
        covariates.push(Covariate {
            spec: CovariateSpec {
                name: entry.name.clone(),
                kind,
                roles: entry.roles.clone(),
            },
            data,
        });
    }

    let data = PanelDataset {
        outcome_name: schema.outcome.clone(),
        exposure_name: schema.exposure.clone(),
        y,
        z,
        covariates,
        unit: schema
            .unit
            .as_ref()
            .map(|name| Factor::from_labels(name.clone(), &unit_labels)),
        time: schema.time.as_ref().map(|name| (name.clone(), time)),
    };
    data.validate()?;
    Ok(data)
}

pub fn load_panel(path: &Path, schema: &Schema) -> Result<PanelDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_panel(std::io::BufReader::new(file), schema)
}

/// Writes a panel as CSV with the column order outcome, exposure, unit, time,
/// covariates. Floats are written in shortest round-trip form.
pub fn write_panel<W: Write>(data: &PanelDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![data.outcome_name.clone(), data.exposure_name.clone()];
    header.extend(data.unit.as_ref().map(|u| u.name.clone()));
    header.extend(data.time.as_ref().map(|(n, _)| n.clone()));
    header.extend(data.covariates.iter().map(|c| c.spec.name.clone()));
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut row = vec![data.y[i].to_string(), data.z[i].to_string()];
        if let Some(u) = &data.unit {
            row.push(u.levels[u.codes[i] as usize].clone());
        }
        if let Some((_, t)) = &data.time {
            row.push(t[i].to_string());
        }
        for c in &data.covariates {
            row.push(match (&c.data, &c.spec.kind) {
                (ColumnData::Numeric(v), _) => v[i].to_string(),
                (ColumnData::Categorical(codes), CovariateKind::Categorical { levels }) => {
                    levels[codes[i] as usize].clone()
                }
                _ => unreachable!("validated dataset"),
            });
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<panel writer>", e))?;
    Ok(())
}

/// Affine maps between model units and natural units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub center: f64,
    pub scale: f64,
}

impl Affine {
    pub fn forward(&self, x: f64) -> f64 {
        (x - self.center) / self.scale
    }

    pub fn inverse(&self, x: f64) -> f64 {
        x * self.scale + self.center
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub y: Affine,
    pub z: Affine,
    /// Recorded for numeric covariates; tree splits are scale-free so the
    /// covariates themselves are left untouched.
    pub covariates: Vec<(String, Affine)>,
}

impl Standardization {
    pub fn identity() -> Self {
        let id = Affine {
            center: 0.0,
            scale: 1.0,
        };
        Standardization {
            y: id,
            z: id,
            covariates: Vec::new(),
        }
    }

    /// Factor converting a standardized slope in z to natural units.
    pub fn slope_factor(&self) -> f64 {
        self.y.scale / self.z.scale
    }
}

pub(crate) fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let ss = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Centers and scales y and z to sample mean 0 and sample SD 1.
pub fn standardize(data: &PanelDataset) -> Result<(PanelDataset, Standardization)> {
    if data.n() < 2 {
        return Err(Error::Degenerate("need at least 2 observations".into()));
    }
    let affine = |name: &str, v: &[f64]| -> Result<Affine> {
        let (center, scale) = mean_sd(v);
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Degenerate(format!("`{name}` has zero variance")));
        }
        Ok(Affine { center, scale })
    };
    let ya = affine(&data.outcome_name, &data.y)?;
    let za = affine(&data.exposure_name, &data.z)?;
    let covariates = data
        .covariates
        .iter()
        .filter_map(|c| match &c.data {
            ColumnData::Numeric(v) => {
                let (center, sd) = mean_sd(v);
                let scale = if sd > 0.0 && sd.is_finite() { sd } else { 1.0 };
                Some((c.spec.name.clone(), Affine { center, scale }))
            }
            ColumnData::Categorical(_) => None,
        })
        .collect();
    let mut out = data.clone();
    out.y = data.y.iter().map(|&v| ya.forward(v)).collect();
    out.z = data.z.iter().map(|&v| za.forward(v)).collect();
    Ok((
        out,
        Standardization {
            y: ya,
            z: za,
            covariates,
        },
    ))
}

/// Column-major covariate matrix consumed by the forests.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub n: usize,
}

impl Design {
    pub fn new(n: usize) -> Self {
        Design {
            names: Vec::new(),
            columns: Vec::new(),
            n,
        }
    }

    pub fn from_columns(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        let n = columns.first().map_or(0, Vec::len);
        if names.len() != columns.len() {
            return Err(Error::Shape("one name per column required".into()));
        }
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::Shape("columns differ in length".into()));
        }
        Ok(Design { names, columns, n })
    }

    pub fn push(&mut self, name: impl Into<String>, column: Vec<f64>) {
        debug_assert_eq!(column.len(), self.n);
        self.names.push(name.into());
        self.columns.push(column);
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    /// Builds a design from row-major rows.
    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let p = names.len();
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::Shape(format!("every row must have {p} entries")));
        }
        let columns = (0..p).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
        Ok(Design {
            names,
            columns,
            n: rows.len(),
        })
    }

    fn push_covariate(&mut self, cov: &Covariate) {
        match (&cov.data, &cov.spec.kind) {
            (ColumnData::Numeric(v), _) => self.push(cov.spec.name.clone(), v.clone()),
            (ColumnData::Categorical(codes), CovariateKind::Categorical { levels }) => {
                self.push_one_hot(&cov.spec.name, levels, codes)
            }
            _ => unreachable!("validated dataset"),
        }
    }

    fn push_one_hot(&mut self, name: &str, levels: &[String], codes: &[u32]) {
        for (k, level) in levels.iter().enumerate() {
            let col = codes
                .iter()
                .map(|&c| if c as usize == k { 1.0 } else { 0.0 })
                .collect();
            self.push(format!("{name}={level}"), col);
        }
    }

    fn push_panel_ids(&mut self, data: &PanelDataset) {
        if let Some(unit) = &data.unit {
            self.push_one_hot(&unit.name, &unit.levels, &unit.codes);
        }
        if let Some((name, t)) = &data.time {
            self.push(name.clone(), t.clone());
        }
    }
}

/// Control design (for μ) and moderator design (for τ).
///
/// Unit identifiers enter both as full one-hot blocks, time as a numeric
/// scalar.
pub fn design_matrices(data: &PanelDataset) -> Result<(Design, Design)> {
    let n = data.n();
    let controls: Vec<&Covariate> = data
        .covariates
        .iter()
        .filter(|c| c.spec.has_role(Role::Control))
        .collect();
    if controls.is_empty() {
        return Err(Error::Config("no covariate has the control role".into()));
    }
    let mut control = Design::new(n);
    for c in controls {
        control.push_covariate(c);
    }
    control.push_panel_ids(data);

    let mut moderator = Design::new(n);
    for c in data.covariates.iter().filter(|c| c.spec.has_role(Role::Moderator)) {
        moderator.push_covariate(c);
    }
    moderator.push_panel_ids(data);
    Ok((control, moderator))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema_yz() -> Schema {
        Schema::from_toml_str(
            r#"
            outcome = "y"
            exposure = "z"
            unit = "state"
            time = "year"
            "#,
        )
        .unwrap()
    }

    #[test]
    fn minimal_two_row_panel() {
        let csv = "y,z,state,year\n1.0,0.5,AK,1985\n2.0,0.25,AL,1986\n";
        let mut schema = schema_yz();
        schema.covariates.push(SchemaEntry {
            name: "year2".into(),
            kind: "numeric".into(),
            roles: vec![Role::Control],
            levels: None,
        });
        // year2 is absent from the file.
        let err = read_panel(csv.as_bytes(), &schema).unwrap_err();
        assert!(err.to_string().contains("year2"));

        let d = read_panel(csv.as_bytes(), &schema_yz()).unwrap();
        assert_eq!(d.n(), 2);
        assert_eq!(d.unit.as_ref().unwrap().levels, vec!["AK", "AL"]);
        assert_eq!(d.time.as_ref().unwrap().1, vec![1985.0, 1986.0]);
    }

    #[test]
    fn missing_exposure_column_is_named() {
        let csv = "y,state,year\n1.0,AK,1985\n2.0,AL,1986\n";
        match read_panel(csv.as_bytes(), &schema_yz()) {
            Err(Error::Schema { column, .. }) => assert_eq!(column, "z"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_and_bad_cells() {
        let csv = "y,z,state,year\n1.0,,AK,1985\n2.0,0.3,AL,1986\n";
        match read_panel(csv.as_bytes(), &schema_yz()) {
            Err(Error::MissingValue { row, column }) => {
                assert_eq!((row, column.as_str()), (1, "z"))
            }
            other => panic!("unexpected {other:?}"),
        }
        let csv = "y,z,state,year\n1.0,0.1,AK,1985\n2.0,abc,AL,1986\n";
        match read_panel(csv.as_bytes(), &schema_yz()) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column.as_str()), (2, "z")),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn numeric_panel(y: Vec<f64>, z: Vec<f64>) -> PanelDataset {
        let n = y.len();
        PanelDataset {
            outcome_name: "y".into(),
            exposure_name: "z".into(),
            y,
            z,
            covariates: vec![Covariate {
                spec: CovariateSpec::numeric("x", &[Role::Control, Role::Moderator]),
                data: ColumnData::Numeric((0..n).map(|i| i as f64).collect()),
            }],
            unit: None,
            time: None,
        }
    }

    #[test]
    fn two_point_standardization() {
        let (s, st) = standardize(&numeric_panel(vec![0.0, 2.0], vec![1.0, 3.0])).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.y[0] + r).abs() < 1e-12 && (s.y[1] - r).abs() < 1e-12);
        assert!((st.y.center - 1.0).abs() < 1e-15);
        assert!((st.y.scale - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn standardization_is_idempotent() {
        let (s1, _) = standardize(&numeric_panel(
            vec![0.3, -1.2, 2.2, 0.1, 0.9],
            vec![1.0, 3.0, -2.0, 0.5, 0.0],
        ))
        .unwrap();
        let (s2, st2) = standardize(&s1).unwrap();
        assert!(st2.y.center.abs() < 1e-12 && (st2.y.scale - 1.0).abs() < 1e-12);
        for (a, b) in s1.y.iter().zip(&s2.y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_variance_is_rejected() {
        let err = standardize(&numeric_panel(vec![5.0; 3], vec![1.0, 2.0, 3.0])).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn empty_control_set_is_a_config_error() {
        let mut d = numeric_panel(vec![0.0, 1.0], vec![1.0, 2.0]);
        d.covariates[0].spec.roles = vec![Role::Moderator];
        assert!(matches!(design_matrices(&d), Err(Error::Config(_))));
    }

    #[test]
    fn shared_numeric_covariate_and_one_hot() {
        let mut d = numeric_panel(vec![0.0, 1.0, 2.0], vec![1.0, 2.0, 0.0]);
        let (c, m) = design_matrices(&d).unwrap();
        assert_eq!(c.columns, m.columns);
        assert_eq!(c.ncols(), 1);

        d.covariates.push(Covariate {
            spec: CovariateSpec {
                name: "region".into(),
                kind: CovariateKind::Categorical {
                    levels: vec!["a".into(), "b".into(), "c".into()],
                },
                roles: vec![Role::Control],
            },
            data: ColumnData::Categorical(vec![2, 0, 1]),
        });
        d.unit = Some(Factor::from_labels("state", &["s1".into(), "s2".into(), "s1".into()]));
        d.time = Some(("year".into(), vec![1.0, 2.0, 3.0]));
        let (c, m) = design_matrices(&d).unwrap();
        // x, region×3, state×2, year
        assert_eq!(c.ncols(), 7);
        assert_eq!(m.ncols(), 4);
        for i in 0..3 {
            let s: f64 = (1..4).map(|j| c.columns[j][i]).sum();
            assert_eq!(s, 1.0);
        }
        assert_eq!(c.n, 3);
        assert_eq!(m.names.last().unwrap(), "year");
    }

    prop_compose! {
        fn arb_panel()(n in 2usize..30)(
            y in prop::collection::vec(-1e3f64..1e3, n),
            z in prop::collection::vec(-1e3f64..1e3, n),
            x in prop::collection::vec(-1e6f64..1e6, n),
            g in prop::collection::vec(0u32..3, n),
            u in prop::collection::vec(0u32..4, n),
        ) -> PanelDataset {
            let labels: Vec<String> = u.iter().map(|k| format!("u{k}")).collect();
            PanelDataset {
                outcome_name: "y".into(),
                exposure_name: "z".into(),
                y,
                z,
                covariates: vec![
                    Covariate {
                        spec: CovariateSpec::numeric("x", &[Role::Control]),
                        data: ColumnData::Numeric(x),
                    },
                    Covariate {
                        spec: CovariateSpec {
                            name: "g".into(),
                            kind: CovariateKind::Categorical {
                                levels: vec!["p".into(), "q".into(), "r".into()],
                            },
                            roles: vec![Role::Moderator, Role::Control],
                        },
                        data: ColumnData::Categorical(g),
                    },
                ],
                unit: Some(Factor::from_labels("unit", &labels)),
                time: Some(("t".into(), (0..labels.len()).map(|i| 1990.0 + i as f64).collect())),
            }
        }
    }

    proptest! {
        #[test]
        fn panel_csv_round_trip(d in arb_panel()) {
            let mut buf = Vec::new();
            write_panel(&d, &mut buf).unwrap();
            let back = read_panel(buf.as_slice(), &d.schema()).unwrap();
            prop_assert_eq!(back, d);
        }

        #[test]
        fn standardize_round_trip(d in arb_panel()) {
            prop_assume!(mean_sd(&d.y).1 > 1e-6 && mean_sd(&d.z).1 > 1e-6);
            let (s, st) = standardize(&d).unwrap();
            for (orig, std) in d.y.iter().zip(&s.y) {
                prop_assert!((st.y.inverse(*std) - orig).abs() < 1e-10);
            }
            for (orig, std) in d.z.iter().zip(&s.z) {
                prop_assert!((st.z.inverse(*std) - orig).abs() < 1e-10);
            }
            let (m, sd) = mean_sd(&s.y);
            prop_assert!(m.abs() < 1e-10 && (sd - 1.0).abs() < 1e-10);
        }

        #[test]
        fn design_rows_and_one_hot(d in arb_panel()) {
            let (c, m) = design_matrices(&d).unwrap();
            prop_assert!(c.columns.iter().all(|col| col.len() == d.n()));
            prop_assert!(m.columns.iter().all(|col| col.len() == d.n()));
            for i in 0..d.n() {
                let s: f64 = m.names.iter().zip(&m.columns)
                    .filter(|(name, _)| name.starts_with("g="))
                    .map(|(_, col)| col[i]).sum();
                prop_assert_eq!(s, 1.0);
            }
        }
    }
}
