//! Columnar portfolio model, CSV ingestion and deterministic splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Deref;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Formats a float with 17 significant digits so it parses back bit-identically.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Validation => "validation",
            SplitTag::Test => "test",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "validation" => Ok(SplitTag::Validation),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::Config(format!("unknown fold `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureValue {
    Category(String),
    Number(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SensitiveValue {
    Level(String),
    Scalar(f64),
}

/// One policy, materialised from a [`Portfolio`] row.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRecord {
    pub id: String,
    pub claim_count: f64,
    pub exposure: f64,
    pub baseline_premium: Option<f64>,
    pub sensitive: Option<SensitiveValue>,
    pub features: Vec<(String, FeatureValue)>,
}

impl PolicyRecord {
    pub fn frequency(&self) -> ObservedFrequency {
        ObservedFrequency::new(self.claim_count, self.exposure)
    }
}

/// Claims per policy-year, `N / w`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ObservedFrequency(pub f64);

impl ObservedFrequency {
    pub fn new(claim_count: f64, exposure: f64) -> Self {
        ObservedFrequency(claim_count / exposure)
    }
}

/// Strictly positive per-policy frequency premiums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PremiumVector(Vec<f64>);

impl PremiumVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::Validation(format!(
                "premium at index {i} is not strictly positive ({v})"
            )));
        }
        Ok(PremiumVector(values))
    }

    /// Raises every value to at least `floor`.
    pub fn floored(values: Vec<f64>, floor: f64) -> Self {
        PremiumVector(values.into_iter().map(|v| v.max(floor)).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        if self.0.len() != n {
            return Err(Error::Validation(format!(
                "premium vector has {} entries, portfolio has {n}",
                self.0.len()
            )));
        }
        Ok(())
    }
}

impl Deref for PremiumVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A categorical partition of records: level labels and a per-record level index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grouping {
    pub levels: Vec<String>,
    pub codes: Vec<usize>,
}

impl Grouping {
    /// Levels are sorted lexicographically for a stable ordering.
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        let set: BTreeSet<&str> = labels.iter().map(|s| s.as_ref()).collect();
        let levels: Vec<String> = set.into_iter().map(str::to_owned).collect();
        let index: BTreeMap<&str, usize> = levels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        let codes = labels.iter().map(|s| index[s.as_ref()]).collect();
        Grouping { levels, codes }
    }

    /// Single-level grouping over `n` records.
    pub fn constant(n: usize, label: &str) -> Self {
        Grouping {
            levels: vec![label.to_owned()],
            codes: vec![0; n],
        }
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.levels[self.codes[i]]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Grouping {
            levels: self.levels.clone(),
            codes: idx.iter().map(|&i| self.codes[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SensitiveColumn {
    Categorical(Grouping),
    Continuous(Vec<f64>),
}

impl SensitiveColumn {
    fn subset(&self, idx: &[usize]) -> Self {
        match self {
            SensitiveColumn::Categorical(g) => SensitiveColumn::Categorical(g.subset(idx)),
            SensitiveColumn::Continuous(v) => {
                SensitiveColumn::Continuous(idx.iter().map(|&i| v[i]).collect())
            }
        }
    }

    fn value(&self, i: usize) -> SensitiveValue {
        match self {
            SensitiveColumn::Categorical(g) => SensitiveValue::Level(g.label(i).to_owned()),
            SensitiveColumn::Continuous(v) => SensitiveValue::Scalar(v[i]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

impl ColumnData {
    pub fn kind(&self) -> ColumnKind {
        match self {
            ColumnData::Numeric(_) => ColumnKind::Numeric,
            ColumnData::Categorical(_) => ColumnKind::Categorical,
        }
    }

    fn subset(&self, idx: &[usize]) -> Self {
        match self {
            ColumnData::Numeric(v) => ColumnData::Numeric(idx.iter().map(|&i| v[i]).collect()),
            ColumnData::Categorical(v) => {
                ColumnData::Categorical(idx.iter().map(|&i| v[i].clone()).collect())
            }
        }
    }

    fn value(&self, i: usize) -> FeatureValue {
        match self {
            ColumnData::Numeric(v) => FeatureValue::Number(v[i]),
            ColumnData::Categorical(v) => FeatureValue::Category(v[i].clone()),
        }
    }

    /// String rendering of row `i`, numbers with full precision.
    pub fn render(&self, i: usize) -> String {
        match self {
            ColumnData::Numeric(v) => fmt_f64(v[i]),
            ColumnData::Categorical(v) => v[i].clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldRole {
    Id,
    ClaimCount,
    Exposure,
    Premium,
    Feature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    pub kind: ColumnKind,
    pub role: FieldRole,
}

/// Ordered description of every column of the source file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Schema {
    pub fields: Vec<Field>,
}

impl Schema {
    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn feature_names(&self) -> impl Iterator<Item = &str> {
        self.fields
            .iter()
            .filter(|f| f.role == FieldRole::Feature)
            .map(|f| f.name.as_str())
    }
}

/// How the sensitive feature is derived from a source column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SensitiveSpec {
    /// Column values used as level labels.
    Categorical(String),
    /// Numeric column used as a continuous scalar.
    Continuous(String),
    /// Numeric column cut into right-closed bins at the given edges.
    Binned { column: String, edges: Vec<f64> },
}

impl SensitiveSpec {
    pub fn column(&self) -> &str {
        match self {
            SensitiveSpec::Categorical(c) | SensitiveSpec::Continuous(c) => c,
            SensitiveSpec::Binned { column, .. } => column,
        }
    }
}

/// Column mapping used by [`load_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub id: String,
    pub claims: String,
    pub exposure: String,
    pub premium: Option<String>,
    pub sensitive: Option<SensitiveSpec>,
    /// Columns read as categorical even when every value parses as a number.
    pub force_categorical: Vec<String>,
    /// Optional upper cap applied to claim counts at load time.
    pub cap_claims: Option<f64>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            id: "IDpol".into(),
            claims: "ClaimNb".into(),
            exposure: "Exposure".into(),
            premium: None,
            sensitive: None,
            force_categorical: Vec::new(),
            cap_claims: None,
        }
    }
}

/// Immutable columnar collection of policies.
#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio {
    ids: Vec<String>,
    claims: Vec<f64>,
    exposure: Vec<f64>,
    baseline: Option<Vec<f64>>,
    sensitive: Option<SensitiveColumn>,
    columns: Vec<(String, ColumnData)>,
    schema: Schema,
    split: Vec<SplitTag>,
}

impl Portfolio {
    /// Builds a portfolio from claim counts and exposures only; ids are row indices.
    pub fn from_columns(claims: Vec<f64>, exposure: Vec<f64>) -> Result<Self> {
        if claims.len() != exposure.len() {
            return Err(Error::Validation(format!(
                "claims ({}) and exposure ({}) lengths differ",
                claims.len(),
                exposure.len()
            )));
        }
        for (i, (&n, &w)) in claims.iter().zip(&exposure).enumerate() {
            validate_counts(i + 1, n, w)?;
        }
        let n = claims.len();
        Ok(Portfolio {
            ids: (0..n).map(|i| i.to_string()).collect(),
            claims,
            exposure,
            baseline: None,
            sensitive: None,
            columns: Vec::new(),
            schema: Schema {
                fields: vec![
                    field("IDpol", ColumnKind::Categorical, FieldRole::Id),
                    field("ClaimNb", ColumnKind::Numeric, FieldRole::ClaimCount),
                    field("Exposure", ColumnKind::Numeric, FieldRole::Exposure),
                ],
            },
            split: vec![SplitTag::Train; n],
        })
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.len() {
            return Err(Error::Validation("id column length mismatch".into()));
        }
        self.ids = ids;
        Ok(self)
    }

    pub fn with_baseline(mut self, premium: PremiumVector) -> Result<Self> {
        premium.check_len(self.len())?;
        if !self.schema.fields.iter().any(|f| f.role == FieldRole::Premium) {
            self.schema
                .fields
                .push(field("premium", ColumnKind::Numeric, FieldRole::Premium));
        }
        self.baseline = Some(premium.into_inner());
        Ok(self)
    }

    pub fn with_feature(mut self, name: &str, data: ColumnData) -> Result<Self> {
        let len = match &data {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical(v) => v.len(),
        };
        if len != self.len() {
            return Err(Error::Validation(format!("column `{name}` length mismatch")));
        }
        if self.schema.fields.iter().any(|f| f.name == name) {
            return Err(Error::Validation(format!("duplicate column `{name}`")));
        }
        self.schema
            .fields
            .push(field(name, data.kind(), FieldRole::Feature));
        self.columns.push((name.to_owned(), data));
        Ok(self)
    }

    pub fn with_sensitive(mut self, sensitive: SensitiveColumn) -> Result<Self> {
        let len = match &sensitive {
            SensitiveColumn::Categorical(g) => g.codes.len(),
            SensitiveColumn::Continuous(v) => v.len(),
        };
        if len != self.len() {
            return Err(Error::Validation("sensitive column length mismatch".into()));
        }
        if let SensitiveColumn::Continuous(v) = &sensitive {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation("sensitive values must be finite".into()));
            }
        }
        self.sensitive = Some(sensitive);
        Ok(self)
    }

    /// Derives the sensitive column from one of the feature columns.
    pub fn derive_sensitive(self, spec: &SensitiveSpec) -> Result<Self> {
        let col = self
            .column(spec.column())
            .ok_or_else(|| Error::MissingColumn(spec.column().to_owned()))?;
        let sensitive = match (spec, col) {
            (SensitiveSpec::Categorical(_), ColumnData::Categorical(v)) => {
                SensitiveColumn::Categorical(Grouping::from_labels(v))
            }
            (SensitiveSpec::Categorical(_), ColumnData::Numeric(v)) => {
                let labels: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                SensitiveColumn::Categorical(Grouping::from_labels(&labels))
            }
            (SensitiveSpec::Continuous(_), ColumnData::Numeric(v)) => {
                SensitiveColumn::Continuous(v.clone())
            }
            (SensitiveSpec::Binned { edges, .. }, ColumnData::Numeric(v)) => {
                SensitiveColumn::Categorical(Grouping::from_labels(&bin_categorical(v, edges)?))
            }
            (_, ColumnData::Categorical(_)) => {
                return Err(Error::Config(format!(
                    "sensitive column `{}` is categorical and cannot be used as a number",
                    spec.column()
                )))
            }
        };
        self.with_sensitive(sensitive)
    }

    pub fn len(&self) -> usize {
        self.claims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.claims.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn claims(&self) -> &[f64] {
        &self.claims
    }

    pub fn exposure(&self) -> &[f64] {
        &self.exposure
    }

    /// Observed frequencies `Y_i = N_i / w_i`.
    pub fn frequency(&self) -> Vec<f64> {
        self.claims
            .iter()
            .zip(&self.exposure)
            .map(|(&n, &w)| ObservedFrequency::new(n, w).0)
            .collect()
    }

    pub fn baseline(&self) -> Option<&[f64]> {
        self.baseline.as_deref()
    }

    pub fn baseline_premium(&self) -> Result<PremiumVector> {
        let b = self
            .baseline
            .as_ref()
            .ok_or_else(|| Error::Config("portfolio has no baseline premium column".into()))?;
        PremiumVector::new(b.clone())
    }

    pub fn sensitive(&self) -> Option<&SensitiveColumn> {
        self.sensitive.as_ref()
    }

    pub fn grouping(&self) -> Result<&Grouping> {
        match &self.sensitive {
            Some(SensitiveColumn::Categorical(g)) => Ok(g),
            Some(SensitiveColumn::Continuous(_)) => Err(Error::Config(
                "sensitive feature is continuous; a categorical one is required".into(),
            )),
            None => Err(Error::Config("no sensitive feature selected".into())),
        }
    }

    pub fn sensitive_values(&self) -> Result<&[f64]> {
        match &self.sensitive {
            Some(SensitiveColumn::Continuous(v)) => Ok(v),
            Some(SensitiveColumn::Categorical(_)) => Err(Error::Config(
                "sensitive feature is categorical; a continuous one is required".into(),
            )),
            None => Err(Error::Config("no sensitive feature selected".into())),
        }
    }

    pub fn column(&self, name: &str) -> Option<&ColumnData> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, c)| c)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn split_tags(&self) -> &[SplitTag] {
        &self.split
    }

    pub fn total_exposure(&self) -> f64 {
        self.exposure.iter().sum()
    }

    pub fn total_claims(&self) -> f64 {
        self.claims.iter().sum()
    }

    pub fn record(&self, i: usize) -> PolicyRecord {
        PolicyRecord {
            id: self.ids[i].clone(),
            claim_count: self.claims[i],
            exposure: self.exposure[i],
            baseline_premium: self.baseline.as_ref().map(|b| b[i]),
            sensitive: self.sensitive.as_ref().map(|s| s.value(i)),
            features: self
                .columns
                .iter()
                .map(|(n, c)| (n.clone(), c.value(i)))
                .collect(),
        }
    }

    pub fn fold_indices(&self, tag: SplitTag) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == tag)
            .map(|(i, _)| i)
            .collect()
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Portfolio {
        Portfolio {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            claims: idx.iter().map(|&i| self.claims[i]).collect(),
            exposure: idx.iter().map(|&i| self.exposure[i]).collect(),
            baseline: self
                .baseline
                .as_ref()
                .map(|b| idx.iter().map(|&i| b[i]).collect()),
            sensitive: self.sensitive.as_ref().map(|s| s.subset(idx)),
            columns: self
                .columns
                .iter()
                .map(|(n, c)| (n.clone(), c.subset(idx)))
                .collect(),
            schema: self.schema.clone(),
            split: idx.iter().map(|&i| self.split[i]).collect(),
        }
    }

    pub fn fold(&self, tag: SplitTag) -> Portfolio {
        self.subset(&self.fold_indices(tag))
    }

    pub fn with_split_tags(mut self, tags: Vec<SplitTag>) -> Result<Self> {
        if tags.len() != self.len() {
            return Err(Error::Validation("split tag length mismatch".into()));
        }
        self.split = tags;
        Ok(self)
    }
}

fn field(name: &str, kind: ColumnKind, role: FieldRole) -> Field {
    Field {
        name: name.to_owned(),
        kind,
        role,
    }
}

fn validate_counts(row: usize, n: f64, w: f64) -> Result<()> {
    if !(w.is_finite() && w > 0.0) {
        return Err(Error::Row {
            row,
            message: format!("exposure must be positive, got {w}"),
        });
    }
    if !(n.is_finite() && n >= 0.0) {
        return Err(Error::Row {
            row,
            message: format!("claim count must be non-negative, got {n}"),
        });
    }
    Ok(())
}

fn parse_num(row: usize, column: &str, raw: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| Error::Row {
        row,
        message: format!("column `{column}`: cannot parse `{raw}` as a number"),
    })
}

/// Reads a comma-separated file with a mandatory header row.
///
/// Rows are numbered from 1 (the first data row) in error messages. Columns
/// other than id/claims/exposure/premium become features; a feature is numeric
/// when every value parses as a number, unless listed in `force_categorical`.
pub fn load_csv(path: impl AsRef<Path>, mapping: &ColumnMapping) -> Result<Portfolio> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_owned()).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    };
    let id_col = find(&mapping.id)?;
    let claim_col = find(&mapping.claims)?;
    let exp_col = find(&mapping.exposure)?;
    let prem_col = mapping.premium.as_deref().map(find).transpose()?;
    if let Some(spec) = &mapping.sensitive {
        find(spec.column())?;
    }
    for c in &mapping.force_categorical {
        find(c)?;
    }

    let mut raw: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    for rec in reader.records() {
        let rec = rec?;
        for (j, v) in rec.iter().enumerate().take(headers.len()) {
            raw[j].push(v.to_owned());
        }
    }
    let n = raw.first().map_or(0, Vec::len);

    let mut claims = Vec::with_capacity(n);
    let mut exposure = Vec::with_capacity(n);
    for i in 0..n {
        let mut c = parse_num(i + 1, &mapping.claims, &raw[claim_col][i])?;
        let w = parse_num(i + 1, &mapping.exposure, &raw[exp_col][i])?;
        validate_counts(i + 1, c, w)?;
        if let Some(cap) = mapping.cap_claims {
            c = c.min(cap);
        }
        claims.push(c);
        exposure.push(w);
    }
    let baseline = match prem_col {
        Some(j) => {
            let name = mapping.premium.as_deref().unwrap_or_default();
            let mut b = Vec::with_capacity(n);
            for i in 0..n {
                let p = parse_num(i + 1, name, &raw[j][i])?;
                if !(p.is_finite() && p > 0.0) {
                    return Err(Error::Row {
                        row: i + 1,
                        message: format!("baseline premium must be positive, got {p}"),
                    });
                }
                b.push(p);
            }
            Some(b)
        }
        None => None,
    };

    let mut fields = Vec::with_capacity(headers.len());
    let mut columns = Vec::new();
    for (j, name) in headers.iter().enumerate() {
        let role = if j == id_col {
            FieldRole::Id
        } else if j == claim_col {
            FieldRole::ClaimCount
        } else if j == exp_col {
            FieldRole::Exposure
        } else if Some(j) == prem_col {
            FieldRole::Premium
        } else {
            FieldRole::Feature
        };
        let kind = match role {
            FieldRole::Id => ColumnKind::Categorical,
            FieldRole::ClaimCount | FieldRole::Exposure | FieldRole::Premium => ColumnKind::Numeric,
            FieldRole::Feature => {
                let values = std::mem::take(&mut raw[j]);
                let numeric = !mapping.force_categorical.contains(name)
                    && values.iter().all(|v| v.trim().parse::<f64>().is_ok());
                let data = if numeric {
                    ColumnData::Numeric(values.iter().map(|v| v.trim().parse().unwrap()).collect())
                } else {
                    ColumnData::Categorical(values)
                };
                let kind = data.kind();
                columns.push((name.clone(), data));
                kind
            }
        };
        fields.push(field(name, kind, role));
    }

    let portfolio = Portfolio {
        ids: std::mem::take(&mut raw[id_col]),
        claims,
        exposure,
        baseline,
        sensitive: None,
        columns,
        schema: Schema { fields },
        split: vec![SplitTag::Train; n],
    };
    match &mapping.sensitive {
        Some(spec) => portfolio.derive_sensitive(spec),
        None => Ok(portfolio),
    }
}

/// Writes the portfolio back in its schema's column order.
pub fn write_csv(portfolio: &Portfolio, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    write_portfolio(portfolio, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_portfolio<W: std::io::Write>(
    portfolio: &Portfolio,
    w: &mut csv::Writer<W>,
) -> Result<()> {
    let fields = &portfolio.schema.fields;
    w.write_record(fields.iter().map(|f| f.name.as_str()))?;
    for i in 0..portfolio.len() {
        let row: Vec<String> = fields
            .iter()
            .map(|f| match f.role {
                FieldRole::Id => portfolio.ids[i].clone(),
                FieldRole::ClaimCount => fmt_f64(portfolio.claims[i]),
                FieldRole::Exposure => fmt_f64(portfolio.exposure[i]),
                FieldRole::Premium => portfolio
                    .baseline
                    .as_ref()
                    .map(|b| fmt_f64(b[i]))
                    .unwrap_or_default(),
                FieldRole::Feature => portfolio
                    .column(&f.name)
                    .map(|c| c.render(i))
                    .unwrap_or_default(),
            })
            .collect();
        w.write_record(&row)?;
    }
    Ok(())
}

/// Tags every record train/validation/test.
///
/// When the sensitive feature is categorical the split is stratified by level;
/// within each stratum the counts are the floors of `fraction * size` with the
/// leftover records handed out by largest remainder.
pub fn split(portfolio: Portfolio, fractions: [f64; 3], seed: u64) -> Result<Portfolio> {
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err(Error::Config(format!(
            "split fractions must be non-negative, got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {total}"
        )));
    }

    let n = portfolio.len();
    let strata: Vec<Vec<usize>> = match portfolio.sensitive() {
        Some(SensitiveColumn::Categorical(g)) => {
            let mut s = vec![Vec::new(); g.n_levels()];
            for (i, &c) in g.codes.iter().enumerate() {
                s[c].push(i);
            }
            s
        }
        _ => vec![(0..n).collect()],
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tags = vec![SplitTag::Train; n];
    let order = [SplitTag::Train, SplitTag::Validation, SplitTag::Test];
    for mut stratum in strata {
        stratum.shuffle(&mut rng);
        let counts = allocate(stratum.len(), &fractions);
        let mut pos = 0;
        for (tag, count) in order.iter().zip(counts) {
            for &i in &stratum[pos..pos + count] {
                tags[i] = *tag;
            }
            pos += count;
        }
    }
    portfolio.with_split_tags(tags)
}

fn allocate(m: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * m as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = (e + 1e-9).floor() as usize;
    }
    let mut left = m.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..3).filter(|&j| fractions[j] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &j in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[j] += 1;
        left -= 1;
    }
    counts
}

/// Cuts values into right-closed intervals `(e_{k-1}, e_k]`.
///
/// Values at or below the first edge fall in the first bin, values above the
/// last edge in the overflow bin labelled `>e`. The first bin is labelled with
/// a lower bound of 0 when the first edge is positive, `-inf` otherwise.
pub fn bin_categorical(values: &[f64], edges: &[f64]) -> Result<Vec<String>> {
    if edges.is_empty() {
        return Err(Error::Config("at least one bin edge is required".into()));
    }
    if edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| !e.is_finite()) {
        return Err(Error::Config(format!(
            "bin edges must be finite and strictly ascending, got {edges:?}"
        )));
    }
    let mut labels = Vec::with_capacity(edges.len() + 1);
    let first_lo = if edges[0] > 0.0 { "0".to_owned() } else { "-inf".to_owned() };
    labels.push(format!("({first_lo},{}]", edges[0]));
    for w in edges.windows(2) {
        labels.push(format!("({},{}]", w[0], w[1]));
    }
    labels.push(format!(">{}", edges[edges.len() - 1]));

    values
        .iter()
        .map(|&v| {
            if v.is_nan() {
                return Err(Error::Validation("cannot bin NaN".into()));
            }
            let k = edges.partition_point(|&e| e < v);
            Ok(labels[k].clone())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn frequency_is_count_over_exposure() {
        let f = write_tmp("IDpol,ClaimNb,Exposure\n1,1,0.5\n");
        let p = load_csv(f.path(), &ColumnMapping::default()).unwrap();
        assert_eq!(p.frequency(), vec![2.0]);
        assert_eq!(p.record(0).frequency().0, 2.0);
    }

    #[test]
    fn zero_exposure_is_a_row_error() {
        let f = write_tmp("IDpol,ClaimNb,Exposure\n1,0,0.3\n2,1,0\n");
        match load_csv(f.path(), &ColumnMapping::default()) {
            Err(Error::Row { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn unparseable_number_is_a_row_error() {
        let f = write_tmp("IDpol,ClaimNb,Exposure\n1,x,0.3\n");
        assert!(matches!(
            load_csv(f.path(), &ColumnMapping::default()),
            Err(Error::Row { row: 1, .. })
        ));
    }

    #[test]
    fn missing_column_is_named() {
        let f = write_tmp("IDpol,Exposure\n1,0.3\n");
        match load_csv(f.path(), &ColumnMapping::default()) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "ClaimNb"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fremtpl_shaped_file_has_twelve_fields() {
        let f = write_tmp(
            "IDpol,ClaimNb,Exposure,Area,VehPower,VehAge,DrivAge,BonusMalus,VehBrand,VehGas,Density,Region\n\
             1,1,0.1,D,5,0,55,50,B12,Regular,1217,R82\n\
             3,0,0.77,D,5,12,55,50,B12,Diesel,1217,R82\n",
        );
        let mapping = ColumnMapping {
            sensitive: Some(SensitiveSpec::Binned {
                column: "VehAge".into(),
                edges: vec![3.0, 9.0],
            }),
            force_categorical: vec!["VehPower".into()],
            ..Default::default()
        };
        let p = load_csv(f.path(), &mapping).unwrap();
        assert_eq!(p.schema().len(), 12);
        assert_eq!(p.schema().feature_names().count(), 9);
        assert_eq!(p.column("VehPower").unwrap().kind(), ColumnKind::Categorical);
        assert_eq!(p.column("Density").unwrap().kind(), ColumnKind::Numeric);
        let g = p.grouping().unwrap();
        assert_eq!(g.label(0), "(0,3]");
        assert_eq!(g.label(1), ">9");
    }

    #[test]
    fn cap_claims_applies_when_requested() {
        let f = write_tmp("IDpol,ClaimNb,Exposure\n1,7,1\n");
        let m = ColumnMapping {
            cap_claims: Some(4.0),
            ..Default::default()
        };
        assert_eq!(load_csv(f.path(), &m).unwrap().claims(), &[4.0]);
        assert_eq!(
            load_csv(f.path(), &ColumnMapping::default()).unwrap().claims(),
            &[7.0]
        );
    }

    #[test]
    fn csv_round_trip_is_field_identical() {
        let f = write_tmp(
            "IDpol,ClaimNb,Exposure,Area,Density,pi\n\
             a,1,0.1,D,1217.5,0.07\n\
             b,0,0.333333333333,E,3,0.11\n",
        );
        let mapping = ColumnMapping {
            premium: Some("pi".into()),
            ..Default::default()
        };
        let p = load_csv(f.path(), &mapping).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_csv(&p, out.path()).unwrap();
        let q = load_csv(out.path(), &mapping).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn degenerate_split_puts_everything_in_train() {
        let p = Portfolio::from_columns(vec![0.0; 7], vec![1.0; 7]).unwrap();
        let p = split(p, [1.0, 0.0, 0.0], 3).unwrap();
        assert!(p.split_tags().iter().all(|t| *t == SplitTag::Train));
    }

    #[test]
    fn split_sizes_for_ten_records() {
        let p = Portfolio::from_columns(vec![0.0; 10], vec![1.0; 10]).unwrap();
        let p = split(p, [0.6, 0.2, 0.2], 11).unwrap();
        let count = |t| p.split_tags().iter().filter(|x| **x == t).count();
        assert_eq!(
            (count(SplitTag::Train), count(SplitTag::Validation), count(SplitTag::Test)),
            (6, 2, 2)
        );
    }

    #[test]
    fn split_is_deterministic_and_stratified() {
        let labels: Vec<String> = (0..103).map(|i| format!("g{}", i % 3)).collect();
        let p = Portfolio::from_columns(vec![0.0; 103], vec![1.0; 103])
            .unwrap()
            .with_sensitive(SensitiveColumn::Categorical(Grouping::from_labels(&labels)))
            .unwrap();
        let a = split(p.clone(), [0.6, 0.2, 0.2], 42).unwrap();
        let b = split(p.clone(), [0.6, 0.2, 0.2], 42).unwrap();
        assert_eq!(a.split_tags(), b.split_tags());
        let g = a.grouping().unwrap();
        for level in 0..3 {
            let m = g.codes.iter().filter(|&&c| c == level).count() as f64;
            let train = (0..a.len())
                .filter(|&i| g.codes[i] == level && a.split_tags()[i] == SplitTag::Train)
                .count() as f64;
            assert!((train - 0.6 * m).abs() <= 1.0);
        }
        let c = split(p, [0.6, 0.2, 0.2], 43).unwrap();
        assert_ne!(a.split_tags(), c.split_tags());
    }

    #[test]
    fn split_rejects_fractions_not_summing_to_one() {
        let p = Portfolio::from_columns(vec![0.0; 3], vec![1.0; 3]).unwrap();
        assert!(matches!(split(p, [0.5, 0.2, 0.2], 0), Err(Error::Config(_))));
    }

    #[test]
    fn split_preserves_totals() {
        let claims: Vec<f64> = (0..50).map(|i| (i % 4) as f64).collect();
        let exposure: Vec<f64> = (0..50).map(|i| 0.1 + i as f64 / 100.0).collect();
        let p = Portfolio::from_columns(claims, exposure).unwrap();
        let (n, w) = (p.total_claims(), p.total_exposure());
        let p = split(p, [0.6, 0.2, 0.2], 5).unwrap();
        let folds = [SplitTag::Train, SplitTag::Validation, SplitTag::Test].map(|t| p.fold(t));
        let n2: f64 = folds.iter().map(Portfolio::total_claims).sum();
        let w2: f64 = folds.iter().map(Portfolio::total_exposure).sum();
        assert_eq!(n, n2);
        assert!((w - w2).abs() < 1e-12);
    }

    #[test]
    fn vehicle_age_bins() {
        let labels = bin_categorical(&[2.0, 9.0, 25.0, 0.0, 3.0, 4.0], &[3.0, 9.0]).unwrap();
        assert_eq!(labels, vec!["(0,3]", "(3,9]", ">9", "(0,3]", "(0,3]", "(3,9]"]);
    }

    #[test]
    fn non_ascending_edges_rejected() {
        assert!(matches!(
            bin_categorical(&[1.0], &[9.0, 3.0]),
            Err(Error::Config(_))
        ));
        assert!(bin_categorical(&[1.0], &[3.0, 3.0]).is_err());
    }

    #[test]
    fn premium_vector_rejects_non_positive() {
        assert!(PremiumVector::new(vec![0.1, 0.0]).is_err());
        assert!(PremiumVector::new(vec![0.1, f64::NAN]).is_err());
        assert!(PremiumVector::new(vec![0.1, 2.0]).is_ok());
    }
}
