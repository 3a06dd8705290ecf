//! Poisson log-link GLM with exposure offset, fitted by IRLS on one-hot
//! encoded features.

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::categorical::{quantile_bins, BinScheme};
use crate::data::{ColumnData, Portfolio, PremiumVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmConfig {
    /// Exposure-weighted quantile bins per numeric feature.
    pub feature_bins: usize,
    pub max_iterations: usize,
    /// Relative log-likelihood change that ends IRLS.
    pub tol: f64,
    /// Added to the diagonal of the normal equations, intercept excluded.
    pub ridge: f64,
}

impl Default for GlmConfig {
    fn default() -> Self {
        GlmConfig {
            feature_bins: 10,
            max_iterations: 100,
            tol: 1e-10,
            ridge: 1e-8,
        }
    }
}

/// Encoding of one feature into indicator columns; the reference level has
/// no column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureEncoding {
    Categorical {
        name: String,
        reference: String,
        /// Non-reference levels, in column order.
        levels: Vec<String>,
    },
    Binned {
        name: String,
        bins: BinScheme,
        reference: usize,
    },
}

impl FeatureEncoding {
    pub fn name(&self) -> &str {
        match self {
            FeatureEncoding::Categorical { name, .. } | FeatureEncoding::Binned { name, .. } => name,
        }
    }

    fn n_columns(&self) -> usize {
        match self {
            FeatureEncoding::Categorical { levels, .. } => levels.len(),
            FeatureEncoding::Binned { bins, .. } => bins.n_bins() - 1,
        }
    }

    fn column_names(&self) -> Vec<String> {
        match self {
            FeatureEncoding::Categorical { name, levels, .. } => {
                levels.iter().map(|l| format!("{name}={l}")).collect()
            }
            FeatureEncoding::Binned {
                name,
                bins,
                reference,
            } => (0..bins.n_bins())
                .filter(|k| k != reference)
                .map(|k| {
                    let (lo, hi) = bins.bounds(k);
                    format!("{name}[{lo},{hi}]")
                })
                .collect(),
        }
    }

    /// Offset of the active column within this feature's block, or `None`
    /// for the reference level. The flag marks unseen categorical levels.
    fn active(&self, col: &ColumnData, i: usize) -> Result<(Option<usize>, bool)> {
        match (self, col) {
            (FeatureEncoding::Categorical { reference, levels, .. }, ColumnData::Categorical(v)) => {
                let x = &v[i];
                if x == reference {
                    Ok((None, false))
                } else {
                    match levels.iter().position(|l| l == x) {
                        Some(j) => Ok((Some(j), false)),
                        None => Ok((None, true)),
                    }
                }
            }
            (FeatureEncoding::Categorical { reference, levels, .. }, ColumnData::Numeric(v)) => {
                // Numbers read from a file whose column happened to parse.
                let x = crate::data::fmt_f64(v[i]);
                let plain = v[i].to_string();
                let find = |s: &str| levels.iter().position(|l| l == s);
                if reference == &plain || reference == &x {
                    Ok((None, false))
                } else {
                    match find(&plain).or_else(|| find(&x)) {
                        Some(j) => Ok((Some(j), false)),
                        None => Ok((None, true)),
                    }
                }
            }
            (FeatureEncoding::Binned { bins, reference, .. }, ColumnData::Numeric(v)) => {
                let k = bins.bin_of(v[i]);
                Ok(match k.cmp(reference) {
                    std::cmp::Ordering::Equal => (None, false),
                    std::cmp::Ordering::Less => (Some(k), false),
                    std::cmp::Ordering::Greater => (Some(k - 1), false),
                })
            }
            (FeatureEncoding::Binned { name, .. }, ColumnData::Categorical(_)) => Err(Error::Validation(
                format!("feature `{name}` was numeric in training but is categorical here"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmModel {
    pub intercept: f64,
    pub encodings: Vec<FeatureEncoding>,
    /// Non-intercept coefficients, in encoding order.
    pub coefficients: Vec<f64>,
    pub column_names: Vec<String>,
    /// Standard errors, intercept first.
    pub std_errors: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub log_likelihood_trace: Vec<f64>,
    pub config: GlmConfig,
}

fn encode(portfolio: &Portfolio, features: &[String], cfg: &GlmConfig) -> Result<Vec<FeatureEncoding>> {
    let w = portfolio.exposure();
    let mut out = Vec::with_capacity(features.len());
    for name in features {
        let col = portfolio
            .column(name)
            .ok_or_else(|| Error::MissingColumn(name.clone()))?;
        let enc = match col {
            ColumnData::Categorical(v) => categorical_encoding(name, v.iter().map(String::as_str), w),
            ColumnData::Numeric(v) => {
                let bins = quantile_bins(v, w, cfg.feature_bins)?;
                let mut exp = vec![0.0; bins.n_bins()];
                for (x, wi) in v.iter().zip(w) {
                    exp[bins.bin_of(*x)] += wi;
                }
                FeatureEncoding::Binned {
                    name: name.clone(),
                    reference: argmax(&exp),
                    bins,
                }
            }
        };
        out.push(enc);
    }
    Ok(out)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn categorical_encoding<'a>(name: &str, values: impl Iterator<Item = &'a str>, w: &[f64]) -> FeatureEncoding {
    let mut totals: std::collections::BTreeMap<&str, f64> = Default::default();
    for (x, wi) in values.zip(w) {
        *totals.entry(x).or_default() += wi;
    }
    let levels: Vec<&str> = totals.keys().copied().collect();
    let exp: Vec<f64> = levels.iter().map(|l| totals[l]).collect();
    let r = argmax(&exp);
    FeatureEncoding::Categorical {
        name: name.to_owned(),
        reference: levels[r].to_owned(),
        levels: levels
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != r)
            .map(|(_, l)| (*l).to_owned())
            .collect(),
    }
}

/// Active design columns per record (column 0 is the intercept) and the
/// number of unseen categorical values encountered.
fn design_rows(portfolio: &Portfolio, encodings: &[FeatureEncoding]) -> Result<(Vec<Vec<usize>>, usize)> {
    let mut rows = vec![vec![0usize]; portfolio.len()];
    let mut unseen = 0;
    let mut offset = 1;
    for enc in encodings {
        let col = portfolio
            .column(enc.name())
            .ok_or_else(|| Error::MissingColumn(enc.name().to_owned()))?;
        for (i, row) in rows.iter_mut().enumerate() {
            let (a, u) = enc.active(col, i)?;
            unseen += u as usize;
            if let Some(j) = a {
                row.push(offset + j);
            }
        }
        offset += enc.n_columns();
    }
    Ok((rows, unseen))
}

fn linear_predictor(row: &[usize], intercept: f64, coefficients: &[f64]) -> f64 {
    row[1..].iter().fold(intercept, |eta, &c| eta + coefficients[c - 1])
}

fn cross_product(rows: &[Vec<usize>], weights: &[f64], p: usize) -> DMatrix<f64> {
    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    for (row, &wt) in rows.iter().zip(weights) {
        for &a in row {
            for &b in row {
                xtwx[(a, b)] += wt;
            }
        }
    }
    xtwx
}

/// Columns that are linear combinations of earlier ones, found by a
/// Cholesky factorization that skips a column whose pivot vanishes.
fn collinear_columns(a: &DMatrix<f64>) -> Vec<usize> {
    let p = a.nrows();
    let mut l = DMatrix::<f64>::zeros(p, p);
    let mut bad = Vec::new();
    for j in 0..p {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 1e-10 * a[(j, j)].max(f64::MIN_POSITIVE)) {
            bad.push(j);
            continue;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..p {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    bad
}

/// Fits the Poisson GLM `N ~ Poisson(w exp(x'b))` on the named features.
///
/// Numeric features are cut at exposure-weighted quantiles, categorical
/// ones used as is; each feature drops its most-exposed level.
pub fn fit_baseline(portfolio: &Portfolio, features: &[String], cfg: &GlmConfig) -> Result<GlmModel> {
    if portfolio.is_empty() {
        return Err(Error::Validation("training fold is empty".into()));
    }
    if cfg.feature_bins < 1 || cfg.max_iterations == 0 || !(cfg.tol > 0.0) || cfg.ridge < 0.0 {
        return Err(Error::Config(format!("invalid GLM configuration {cfg:?}")));
    }
    let total_n = portfolio.total_claims();
    if !(total_n > 0.0) {
        return Err(Error::Domain("cannot fit a Poisson GLM without any claims".into()));
    }
    let encodings = encode(portfolio, features, cfg)?;
    let mut column_names = vec!["(intercept)".to_owned()];
    for e in &encodings {
        column_names.extend(e.column_names());
    }
    let p = column_names.len();
    let (rows, _) = design_rows(portfolio, &encodings)?;
    let w = portfolio.exposure();
    let n_claims = portfolio.claims();

    let bad = collinear_columns(&cross_product(&rows, w, p));
    if !bad.is_empty() {
        return Err(Error::RankDeficient(bad.iter().map(|&j| column_names[j].clone()).collect()));
    }

    let mut beta = DVector::<f64>::zeros(p);
    beta[0] = (total_n / portfolio.total_exposure()).ln();
    let loglik = |beta: &DVector<f64>| -> f64 {
        rows.iter()
            .zip(w)
            .zip(n_claims)
            .map(|((row, wi), ni)| {
                let eta = row.iter().map(|&c| beta[c]).sum::<f64>() + wi.ln();
                ni * eta - eta.exp()
            })
            .sum()
    };
    let mut trace = vec![loglik(&beta)];
    let mut converged = false;
    let mut xtwx = DMatrix::zeros(p, p);
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        xtwx = DMatrix::<f64>::zeros(p, p);
        let mut xtwz = DVector::<f64>::zeros(p);
        for ((row, wi), ni) in rows.iter().zip(w).zip(n_claims) {
            let xb: f64 = row.iter().map(|&c| beta[c]).sum();
            let mu = (xb + wi.ln()).exp();
            let z = xb + (ni - mu) / mu;
            for &a in row {
                xtwz[a] += mu * z;
                for &b in row {
                    xtwx[(a, b)] += mu;
                }
            }
        }
        let mut lhs = xtwx.clone();
        for j in 1..p {
            lhs[(j, j)] += cfg.ridge;
        }
        beta = lhs
            .cholesky()
            .ok_or_else(|| {
                Error::RankDeficient(
                    collinear_columns(&xtwx).iter().map(|&j| column_names[j].clone()).collect(),
                )
            })?
            .solve(&xtwz);
        let ll = loglik(&beta);
        let prev = *trace.last().unwrap();
        trace.push(ll);
        if ((ll - prev) / prev.abs().max(1e-300)).abs() <= cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NotConverged(format!(
            "IRLS did not reach tol {} in {} iterations; log-likelihood trace {:?}",
            cfg.tol, cfg.max_iterations, trace
        )));
    }
    info!("IRLS converged in {iterations} iterations");
    let std_errors = match xtwx.clone().try_inverse() {
        Some(inv) => (0..p).map(|j| inv[(j, j)].max(0.0).sqrt()).collect(),
        None => vec![f64::NAN; p],
    };
    Ok(GlmModel {
        intercept: beta[0],
        coefficients: beta.iter().skip(1).copied().collect(),
        encodings,
        column_names,
        std_errors,
        iterations,
        converged,
        log_likelihood_trace: trace,
        config: cfg.clone(),
    })
}

/// Frequency premiums `exp(x'b)`; unseen categorical levels fall back to the
/// reference level. Returns the premiums and the count of such values.
pub fn predict(model: &GlmModel, portfolio: &Portfolio) -> Result<(PremiumVector, usize)> {
    let (rows, unseen) = design_rows(portfolio, &model.encodings)?;
    if unseen > 0 {
        warn!("{unseen} unseen categorical values were mapped to their reference level");
    }
    let premium = rows
        .iter()
        .map(|row| linear_predictor(row, model.intercept, &model.coefficients).exp())
        .collect();
    Ok((PremiumVector::new(premium)?, unseen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::poisson_deviance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    fn two_groups() -> Portfolio {
        Portfolio::from_columns(vec![1.0, 0.0, 2.0, 3.0, 0.0], vec![1.0, 0.5, 0.5, 1.0, 1.0])
            .unwrap()
            .with_feature(
                "g",
                ColumnData::Categorical(vec!["a", "a", "b", "b", "b"].into_iter().map(String::from).collect()),
            )
            .unwrap()
    }

    #[test]
    fn intercept_only_is_portfolio_frequency() {
        let p = two_groups();
        let m = fit_baseline(&p, &[], &GlmConfig::default()).unwrap();
        let (pred, _) = predict(&m, &p).unwrap();
        let freq = 6.0 / 4.0;
        assert!(pred.iter().all(|v| (v - freq).abs() < 1e-12 * freq));
    }

    #[test]
    fn binary_feature_gives_group_frequencies() {
        let p = two_groups();
        let m = fit_baseline(&p, &["g".into()], &GlmConfig::default()).unwrap();
        assert_eq!(m.column_names, vec!["(intercept)", "g=a"]);
        let (pred, _) = predict(&m, &p).unwrap();
        let (fa, fb) = (1.0 / 1.5, 5.0 / 2.5);
        for (i, v) in pred.iter().enumerate() {
            let e = if i < 2 { fa } else { fb };
            assert!((v - e).abs() < 1e-7 * e, "{v} vs {e}");
        }
        let charged: f64 = pred.iter().zip(p.exposure()).map(|(a, b)| a * b).sum();
        assert!((charged - 6.0).abs() < 1e-6 * 6.0);
    }

    #[test]
    fn unseen_level_uses_reference() {
        let p = two_groups();
        let m = fit_baseline(&p, &["g".into()], &GlmConfig::default()).unwrap();
        let q = Portfolio::from_columns(vec![0.0], vec![1.0])
            .unwrap()
            .with_feature("g", ColumnData::Categorical(vec!["zzz".into()]))
            .unwrap();
        let (pred, unseen) = predict(&m, &q).unwrap();
        assert_eq!(unseen, 1);
        assert_eq!(pred[0], m.intercept.exp());
    }

    #[test]
    fn duplicated_feature_is_rank_deficient() {
        let g = ColumnData::Categorical(vec!["a", "a", "b", "b", "b"].into_iter().map(String::from).collect());
        let p = two_groups().with_feature("h", g).unwrap();
        match fit_baseline(&p, &["g".into(), "h".into()], &GlmConfig::default()) {
            Err(Error::RankDeficient(cols)) => assert_eq!(cols, vec!["h=a".to_owned()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_feature_is_reported() {
        assert!(matches!(
            fit_baseline(&two_groups(), &["nope".into()], &GlmConfig::default()),
            Err(Error::MissingColumn(_))
        ));
    }

    #[test]
    fn recovers_log_linear_coefficients() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = [-1.0, 0.4, -0.3];
        let (mut cl, mut ex, mut a, mut b) = (vec![], vec![], vec![], vec![]);
        for _ in 0..n {
            let xa = ["u", "v"][rng.random_range(0..2)];
            let xb = ["p", "q"][rng.random_range(0..2)];
            let w: f64 = rng.random_range(0.05..1.0);
            let eta = truth[0] + if xa == "v" { truth[1] } else { 0.0 } + if xb == "q" { truth[2] } else { 0.0 };
            cl.push(Poisson::new(w * f64::exp(eta)).unwrap().sample(&mut rng));
            ex.push(w);
            a.push(xa.to_owned());
            b.push(xb.to_owned());
        }
        let port = Portfolio::from_columns(cl, ex)
            .unwrap()
            .with_feature("a", ColumnData::Categorical(a))
            .unwrap()
            .with_feature("b", ColumnData::Categorical(b))
            .unwrap();
        let m = fit_baseline(&port, &["a".into(), "b".into()], &GlmConfig::default()).unwrap();
        // Reference levels are the most exposed ones; map back to the truth.
        let coef = |name: &str| m.column_names.iter().position(|c| c == name);
        let eff_a = match coef("a=v") {
            Some(j) => (m.coefficients[j - 1], truth[1], m.std_errors[j]),
            None => {
                let j = coef("a=u").unwrap();
                (m.coefficients[j - 1], -truth[1], m.std_errors[j])
            }
        };
        let eff_b = match coef("b=q") {
            Some(j) => (m.coefficients[j - 1], truth[2], m.std_errors[j]),
            None => {
                let j = coef("b=p").unwrap();
                (m.coefficients[j - 1], -truth[2], m.std_errors[j])
            }
        };
        for (est, tru, se) in [eff_a, eff_b] {
            assert!((est - tru).abs() <= 3.0 * se, "{est} vs {tru} (se {se})");
        }
        let (pred, _) = predict(&m, &port).unwrap();
        let charged: f64 = pred.iter().zip(port.exposure()).map(|(x, y)| x * y).sum();
        assert!((charged - port.total_claims()).abs() <= 1e-6 * port.total_claims());
        let d_full = poisson_deviance(port.claims(), port.exposure(), &pred).unwrap();
        let m0 = fit_baseline(&port, &[], &GlmConfig::default()).unwrap();
        let d_null = poisson_deviance(port.claims(), port.exposure(), &predict(&m0, &port).unwrap().0).unwrap();
        assert!(d_full <= d_null);
    }

    #[test]
    fn numeric_feature_is_binned() {
        let n = 400;
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let claims: Vec<f64> = (0..n).map(|i| (i % 3) as f64).collect();
        let port = Portfolio::from_columns(claims, vec![1.0; n])
            .unwrap()
            .with_feature("x", ColumnData::Numeric(x))
            .unwrap();
        let cfg = GlmConfig {
            feature_bins: 4,
            ..Default::default()
        };
        let m = fit_baseline(&port, &["x".into()], &cfg).unwrap();
        assert_eq!(m.coefficients.len(), 3);
        let (pred, _) = predict(&m, &port).unwrap();
        let (again, _) = predict(&m, &port).unwrap();
        assert_eq!(pred, again);
        let bad = Portfolio::from_columns(vec![0.0], vec![1.0])
            .unwrap()
            .with_feature("x", ColumnData::Categorical(vec!["a".into()]))
            .unwrap();
        assert!(matches!(predict(&m, &bad), Err(Error::Validation(_))));
    }
}
