//! Evaluation metrics and residual-bias diagnostics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::categorical::BinScheme;
use crate::data::{fmt_f64, Grouping, Portfolio};
use crate::error::{Error, Result};

/// Poisson deviance with exposure offset,
/// `2 * sum[N ln(N / (w pi)) - N + w pi]`, where `N ln N` is 0 at `N = 0`.
pub fn poisson_deviance(claims: &[f64], exposure: &[f64], premium: &[f64]) -> Result<f64> {
    check_lengths(claims.len(), exposure.len(), premium.len())?;
    let mut d = 0.0;
    for ((&n, &w), &p) in claims.iter().zip(exposure).zip(premium) {
        if !(p > 0.0) {
            return Err(Error::Domain(format!("premium must be positive, got {p}")));
        }
        let mu = w * p;
        let log_term = if n > 0.0 { n * (n / mu).ln() } else { 0.0 };
        d += log_term - n + mu;
    }
    Ok(2.0 * d)
}

fn check_lengths(a: usize, b: usize, c: usize) -> Result<()> {
    if a != b || b != c {
        return Err(Error::Validation(format!(
            "metric inputs differ in length: {a}, {b}, {c}"
        )));
    }
    Ok(())
}

/// Gini coefficient of the claims concentration curve.
///
/// Records are ordered by ascending premium; tied premiums form a single
/// step. The curve plots cumulative claim share against cumulative exposure
/// share and the Gini index is `1 - 2 * area`, integrated by trapezoids.
pub fn gini_coefficient(premium: &[f64], claims: &[f64], exposure: &[f64]) -> Result<f64> {
    check_lengths(premium.len(), claims.len(), exposure.len())?;
    let total_n: f64 = claims.iter().sum();
    let total_w: f64 = exposure.iter().sum();
    if !(total_n > 0.0) {
        return Err(Error::Domain(
            "Gini coefficient is undefined when total claims are zero".into(),
        ));
    }
    let mut order: Vec<usize> = (0..premium.len()).collect();
    order.sort_by(|&a, &b| premium[a].total_cmp(&premium[b]).then(a.cmp(&b)));

    let (mut cx, mut cy, mut area) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let p = premium[order[i]];
        let (mut dw, mut dn) = (0.0, 0.0);
        while i < order.len() && premium[order[i]] == p {
            dw += exposure[order[i]];
            dn += claims[order[i]];
            i += 1;
        }
        let nx = cx + dw / total_w;
        let ny = cy + dn / total_n;
        area += (nx - cx) * (cy + ny) / 2.0;
        cx = nx;
        cy = ny;
    }
    Ok(1.0 - 2.0 * area)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BregmanFamily {
    Poisson,
    Gaussian,
}

/// `L(y, m) = l(y) - l(m) - l'(m)(y - m)`, with `l(y) = y ln y - y` (Poisson)
/// or `l(y) = y^2` (Gaussian).
pub fn bregman_loss(y: f64, m: f64, family: BregmanFamily) -> Result<f64> {
    match family {
        BregmanFamily::Gaussian => Ok((y - m).powi(2)),
        BregmanFamily::Poisson => {
            if !(m > 0.0) {
                return Err(Error::Domain(format!("Poisson Bregman loss needs m > 0, got {m}")));
            }
            if y < 0.0 {
                return Err(Error::Domain(format!("Poisson Bregman loss needs y >= 0, got {y}")));
            }
            let ylny = if y > 0.0 { y * (y / m).ln() } else { 0.0 };
            Ok(ylny - y + m)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCell {
    pub bin: usize,
    pub group: String,
    pub exposure: f64,
    /// Exposure-weighted mean of `Y - premium`; `None` when the cell is empty.
    pub mean_bias: Option<f64>,
    /// Standard error of `mean_bias` under Poisson claims with mean `w * premium`.
    pub std_error: f64,
    pub mean_premium: Option<f64>,
}

/// Exposure-weighted residual bias per (premium bin, group) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBiasTable {
    pub bins: BinScheme,
    pub groups: Vec<String>,
    /// Row-major over (bin, group).
    pub cells: Vec<BiasCell>,
    /// One cell per bin pooling all groups.
    pub pooled: Vec<BiasCell>,
    /// Per bin `(min, max)` of the group mean biases over non-empty cells.
    pub envelope: Vec<(f64, f64)>,
}

pub const POOLED_LABEL: &str = "ALL";

impl ResidualBiasTable {
    pub fn cell(&self, k: usize, l: usize) -> &BiasCell {
        &self.cells[k * self.groups.len() + l]
    }

    pub fn filled(&self) -> impl Iterator<Item = &BiasCell> {
        self.cells.iter().filter(|c| c.mean_bias.is_some())
    }

    pub fn max_abs_bias(&self) -> f64 {
        self.filled().fold(0.0, |m, c| m.max(c.mean_bias.unwrap().abs()))
    }

    pub fn mean_abs_bias(&self) -> f64 {
        let (s, w) = self.filled().fold((0.0, 0.0), |(s, w), c| {
            (s + c.exposure * c.mean_bias.unwrap().abs(), w + c.exposure)
        });
        if w > 0.0 {
            s / w
        } else {
            0.0
        }
    }

    pub fn max_abs_pooled_bias(&self) -> f64 {
        self.pooled
            .iter()
            .filter_map(|c| c.mean_bias)
            .fold(0.0, |m, b| m.max(b.abs()))
    }

    /// Columns `bin_index, bin_lo, bin_hi, group, exposure, mean_bias`; pooled
    /// rows use group `ALL`, envelope rows `ENVELOPE_MIN` / `ENVELOPE_MAX`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_index", "bin_lo", "bin_hi", "group", "exposure", "mean_bias"])?;
        for k in 0..self.bins.n_bins() {
            let (lo, hi) = self.bins.bounds(k);
            let row = |group: &str, exposure: f64, bias: Option<f64>| {
                vec![
                    k.to_string(),
                    fmt_f64(lo),
                    fmt_f64(hi),
                    group.to_owned(),
                    fmt_f64(exposure),
                    bias.map(fmt_f64).unwrap_or_default(),
                ]
            };
            for l in 0..self.groups.len() {
                let c = self.cell(k, l);
                w.write_record(row(&c.group, c.exposure, c.mean_bias))?;
            }
            let p = &self.pooled[k];
            w.write_record(row(POOLED_LABEL, p.exposure, p.mean_bias))?;
            let (mn, mx) = self.envelope[k];
            w.write_record(row("ENVELOPE_MIN", p.exposure, Some(mn)))?;
            w.write_record(row("ENVELOPE_MAX", p.exposure, Some(mx)))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn bias_cell(bin: usize, group: &str, sw: f64, sr: f64, sp: f64) -> BiasCell {
    let filled = sw > 0.0;
    BiasCell {
        bin,
        group: group.to_owned(),
        exposure: sw,
        mean_bias: filled.then(|| sr / sw),
        std_error: if filled { sp.sqrt() / sw } else { 0.0 },
        mean_premium: filled.then(|| sp / sw),
    }
}

/// Residual bias table of a premium over premium bins crossed with a grouping.
pub fn residual_bias_table(
    portfolio: &Portfolio,
    premium: &[f64],
    bins: &BinScheme,
    grouping: &Grouping,
) -> Result<ResidualBiasTable> {
    let n = portfolio.len();
    check_lengths(n, premium.len(), grouping.codes.len())?;
    let y = portfolio.frequency();
    let w = portfolio.exposure();
    let (nb, nl) = (bins.n_bins(), grouping.n_levels());
    let mut sw = vec![0.0; nb * nl];
    let mut sr = vec![0.0; nb * nl];
    let mut sp = vec![0.0; nb * nl];
    for i in 0..n {
        let c = bins.bin_of(premium[i]) * nl + grouping.codes[i];
        sw[c] += w[i];
        sr[c] += w[i] * (y[i] - premium[i]);
        sp[c] += w[i] * premium[i];
    }
    let mut cells = Vec::with_capacity(nb * nl);
    let mut pooled = Vec::with_capacity(nb);
    let mut envelope = Vec::with_capacity(nb);
    for k in 0..nb {
        let row = k * nl..(k + 1) * nl;
        for (l, c) in row.clone().enumerate() {
            cells.push(bias_cell(k, &grouping.levels[l], sw[c], sr[c], sp[c]));
        }
        let sum = |v: &[f64]| v[row.clone()].iter().sum::<f64>();
        pooled.push(bias_cell(k, POOLED_LABEL, sum(&sw), sum(&sr), sum(&sp)));
        let env = cells[row]
            .iter()
            .filter_map(|c| c.mean_bias)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
        envelope.push(if env.0.is_finite() { env } else { (0.0, 0.0) });
    }
    Ok(ResidualBiasTable {
        bins: bins.clone(),
        groups: grouping.levels.clone(),
        cells,
        pooled,
        envelope,
    })
}

/// Groups a continuous variable into exposure-weighted quantile bins,
/// labelled `S00`, `S01`, ...
pub fn quantile_grouping(values: &[f64], exposure: &[f64], n_bins: usize) -> Result<(Grouping, BinScheme)> {
    let scheme = crate::categorical::quantile_bins(values, exposure, n_bins)?;
    let levels: Vec<String> = (0..scheme.n_bins()).map(|k| format!("S{k:02}")).collect();
    let codes = scheme.assign(values);
    Ok((Grouping { levels, codes }, scheme))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexOrderReport {
    pub mean_a: f64,
    pub mean_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub grid: Vec<f64>,
    pub stop_loss_a: Vec<f64>,
    pub stop_loss_b: Vec<f64>,
    /// Grid indices where `E(a - t)+ > E(b - t)+ + tol`.
    pub violations: Vec<usize>,
    pub tol: f64,
}

impl ConvexOrderReport {
    pub fn means_match(&self) -> bool {
        (self.mean_a - self.mean_b).abs() <= self.tol * self.mean_a.abs().max(1.0)
    }

    /// Whether `a <=cx b` is supported on the grid.
    pub fn holds(&self) -> bool {
        self.means_match() && self.var_a <= self.var_b + self.tol && self.violations.is_empty()
    }
}

fn weighted_moments(z: &[f64], w: &[f64]) -> (f64, f64) {
    let sw: f64 = w.iter().sum();
    let mean = z.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let var = z.iter().zip(w).map(|(a, b)| b * (a - mean).powi(2)).sum::<f64>() / sw;
    (mean, var)
}

fn stop_loss(z: &[f64], w: &[f64], t: f64) -> f64 {
    let sw: f64 = w.iter().sum();
    z.iter().zip(w).map(|(a, b)| b * (a - t).max(0.0)).sum::<f64>() / sw
}

/// Empirical check of `a <=cx b`: means, variances and stop-loss transforms
/// on `grid_size` equally spaced thresholds over the pooled range.
pub fn convex_order_check(
    a: &[f64],
    wa: &[f64],
    b: &[f64],
    wb: &[f64],
    grid_size: usize,
    tol: f64,
) -> Result<ConvexOrderReport> {
    if a.is_empty() || b.is_empty() || a.len() != wa.len() || b.len() != wb.len() {
        return Err(Error::Validation(
            "convex order check needs non-empty samples with matching weights".into(),
        ));
    }
    if grid_size < 2 {
        return Err(Error::Config("stop-loss grid needs at least 2 points".into()));
    }
    let (mean_a, var_a) = weighted_moments(a, wa);
    let (mean_b, var_b) = weighted_moments(b, wb);
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    let grid: Vec<f64> = (0..grid_size)
        .map(|j| lo + (hi - lo) * j as f64 / (grid_size - 1) as f64)
        .collect();
    let stop_loss_a: Vec<f64> = grid.iter().map(|&t| stop_loss(a, wa, t)).collect();
    let stop_loss_b: Vec<f64> = grid.iter().map(|&t| stop_loss(b, wb, t)).collect();
    let violations = (0..grid_size)
        .filter(|&j| stop_loss_a[j] > stop_loss_b[j] + tol)
        .collect();
    Ok(ConvexOrderReport {
        mean_a,
        mean_b,
        var_a,
        var_b,
        grid,
        stop_loss_a,
        stop_loss_b,
        violations,
        tol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MulticalError {
    pub max: f64,
    pub mean: f64,
}

/// Headline metrics emitted by `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub deviance: f64,
    pub gini: f64,
    pub multical_error: MulticalError,
    pub global_balance_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub deviance: f64,
    pub gini: f64,
    pub bias_table: ResidualBiasTable,
    pub multical_error: MulticalError,
    /// `(sum w pi - sum N) / sum N`.
    pub global_balance_gap: f64,
    pub envelope: Vec<(f64, f64)>,
    pub trace: Option<Vec<f64>>,
}

impl DiagnosticsReport {
    pub fn summary(&self) -> EvaluationSummary {
        EvaluationSummary {
            deviance: self.deviance,
            gini: self.gini,
            multical_error: self.multical_error,
            global_balance_gap: self.global_balance_gap,
        }
    }
}

pub fn global_balance_gap(claims: &[f64], exposure: &[f64], premium: &[f64]) -> f64 {
    let charged: f64 = exposure.iter().zip(premium).map(|(w, p)| w * p).sum();
    let observed: f64 = claims.iter().sum();
    (charged - observed) / observed
}

pub fn diagnose(
    portfolio: &Portfolio,
    premium: &[f64],
    bins: &BinScheme,
    grouping: &Grouping,
    trace: Option<Vec<f64>>,
) -> Result<DiagnosticsReport> {
    let table = residual_bias_table(portfolio, premium, bins, grouping)?;
    Ok(DiagnosticsReport {
        deviance: poisson_deviance(portfolio.claims(), portfolio.exposure(), premium)?,
        gini: gini_coefficient(premium, portfolio.claims(), portfolio.exposure())?,
        multical_error: MulticalError {
            max: table.max_abs_bias(),
            mean: table.mean_abs_bias(),
        },
        global_balance_gap: global_balance_gap(portfolio.claims(), portfolio.exposure(), premium),
        envelope: table.envelope.clone(),
        bias_table: table,
        trace,
    })
}
